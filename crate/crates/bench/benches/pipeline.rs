use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use uqseg_bench::{phantom, predictor, tta_stack};
use uqseg_core::geometry;
use uqseg_core::tta::{self, TransformSpec};
use uqseg_core::uncertainty;
use uqseg_core::{binarize, Calibration, Modality, PredictMode, Predictor};

fn decomposition(c: &mut Criterion) {
    let head = phantom(Modality::Head, 1);
    let mut group = c.benchmark_group("decompose");
    for samples in [2usize, 8, 16] {
        let stack = tta_stack(&head, samples, 1);
        group.bench_with_input(BenchmarkId::from_parameter(samples), &stack, |b, stack| {
            b.iter(|| uncertainty::decompose(black_box(stack)))
        });
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let head = phantom(Modality::Head, 2);
    let spec = TransformSpec {
        hflip: true,
        rotation_deg: 7.5,
        scale: 1.05,
        translate_frac: (0.02, -0.03),
        ..TransformSpec::identity()
    };
    c.bench_function("apply_transform", |b| b.iter(|| tta::apply_transform(black_box(&head.image), &spec).unwrap()));
    let prob = predictor().predict(&head.image, PredictMode::Deterministic).unwrap();
    c.bench_function("invert_spatial", |b| b.iter(|| tta::invert_spatial(black_box(&prob), &spec).unwrap()));
    c.bench_function("tta_stack_8", |b| b.iter(|| tta_stack(black_box(&head), 8, 3)));
}

fn measurement(c: &mut Criterion) {
    let calibration = Calibration::new(0.1).unwrap();
    for (name, modality) in [("measure_head", Modality::Head), ("measure_femur", Modality::Femur)] {
        let p = phantom(modality, 4);
        c.bench_function(name, |b| b.iter(|| geometry::measure(black_box(&p.mask), modality, calibration).unwrap()));
    }
    let head = phantom(Modality::Head, 5);
    let prob = predictor().predict(&head.image, PredictMode::Deterministic).unwrap();
    let mask = binarize(&prob, 0.5).unwrap();
    c.bench_function("extract_contours", |b| b.iter(|| geometry::extract_contours(black_box(&mask))));
    let contours = geometry::extract_contours(&mask);
    let outline = geometry::largest_contour(&contours).unwrap();
    c.bench_function("fit_ellipse", |b| b.iter(|| geometry::fit_ellipse(black_box(&outline.points)).unwrap()));
    c.bench_function("min_area_rect", |b| b.iter(|| geometry::min_area_rect(black_box(&outline.points)).unwrap()));
}

criterion_group!(benches, decomposition, augmentation, measurement);
criterion_main!(benches);
