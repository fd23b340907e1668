//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary so the lines always show:
//!
//! ```text
//! cargo test -p uqseg-cli --test acceptance
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;

use uqseg_core::analysis;
use uqseg_core::formats;
use uqseg_core::geometry::{self, Point};
use uqseg_core::phantom::{self, DatasetConfig, DatasetEntry};
use uqseg_core::pipeline::{self, RunConfig, RunOptions, ThresholdSource};
use uqseg_core::seed;
use uqseg_core::tta::{self, AugmentationPriors, TransformSpec};
use uqseg_core::uncertainty;
use uqseg_core::{BinaryMask, Modality, Provenance, Raster, SampleStack, ValueKind};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn options(method: Provenance, samples: usize, seed: u64) -> RunOptions {
    RunOptions { method, samples, seed }
}

fn noiseless(axis_ratio: (f64, f64)) -> DatasetConfig {
    DatasetConfig {
        noise_sigma: 0.0,
        axis_ratio,
        ..DatasetConfig::default()
    }
}

fn head_circumference_recovery() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    let start = Instant::now();
    phantom::generate_dataset(Modality::Head, 20, 2024, &noiseless((1.0, 1.8)), &data).unwrap();
    pipeline::run(&data, &out, &RunConfig::default(), &options(Provenance::Baseline, 1, 0)).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let cases = pipeline::load_results(&out).unwrap();
    let errors: Vec<f64> = cases.iter().filter_map(|c| c.record.rel_error_pct).collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let within = errors.iter().filter(|&&e| e < 2.0).count();
    outcome(
        cases.len() == 20 && within == 20 && elapsed < 5.0,
        format!("{within}/20 within 2% of ground truth (worst {worst:.3}%), {elapsed:.2} s"),
    )
}

fn femur_length_recovery() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    let start = Instant::now();
    phantom::generate_dataset(Modality::Femur, 20, 2025, &noiseless((1.0, 1.8)), &data).unwrap();
    pipeline::run(&data, &out, &RunConfig::default(), &options(Provenance::Baseline, 1, 0)).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let cases = pipeline::load_results(&out).unwrap();
    let errors_px: Vec<f64> = cases
        .iter()
        .filter_map(|c| c.record.abs_error_mm.map(|e| e / c.record.pixel_size_mm))
        .collect();
    let worst = errors_px.iter().cloned().fold(0.0, f64::max);
    let within = errors_px.iter().filter(|&&e| e <= 2.0).count();
    outcome(
        cases.len() == 20 && within == 20 && elapsed < 5.0,
        format!("{within}/20 within 2 px of analytic length (worst {worst:.3} px), {elapsed:.2} s"),
    )
}

fn random_stack(rng: &mut impl Rng, samples: usize, w: usize, h: usize) -> SampleStack {
    let maps = (0..samples)
        .map(|_| Raster::from_fn(w, h, ValueKind::Probability, |_, _| rng.random_range(0.01..=0.99)).unwrap())
        .collect();
    SampleStack::new(maps, Provenance::Tta, Vec::new(), 0).unwrap()
}

fn max_abs_diff(a: &Raster, b: &Raster) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn decomposition_identity() -> Outcome {
    let mut rng = seed::rng(31);
    let (mut sum_gap, mut kl_gap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let stack = random_stack(&mut rng, 8, 32, 32);
        let maps = uncertainty::decompose(&stack);
        for ((t, d), m) in maps
            .total_entropy
            .values()
            .iter()
            .zip(maps.expected_entropy.values())
            .zip(maps.mutual_information.values())
        {
            sum_gap = sum_gap.max((t - (d + m)).abs());
        }
        kl_gap = kl_gap.max(max_abs_diff(&maps.mutual_information, &uncertainty::mutual_information_kl(&stack)));
    }
    outcome(
        sum_gap <= 1e-9 && kl_gap <= 1e-9,
        format!("100 stacks: max |total - (data + model)| = {sum_gap:.2e}, max |MI - mean KL(p_i || p_hat)| = {kl_gap:.2e}"),
    )
}

fn mi_nonnegativity_and_degeneracies() -> Outcome {
    let mut rng = seed::rng(32);
    let mut min_mi = f64::INFINITY;
    for _ in 0..100 {
        let stack = random_stack(&mut rng, 8, 32, 32);
        let mi = uncertainty::decompose(&stack).mutual_information;
        min_mi = min_mi.min(mi.values().iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let mut identical_zero = true;
    let mut single_zero = true;
    for _ in 0..20 {
        let one = random_stack(&mut rng, 1, 32, 32);
        let same = SampleStack::new(vec![one.maps()[0].clone(); 8], Provenance::Mcd, Vec::new(), 0).unwrap();
        let m = uncertainty::decompose(&same);
        identical_zero &= [&m.mutual_information, &m.ekl, &m.variance]
            .iter()
            .all(|r| r.values().iter().all(|&v| v == 0.0));
        single_zero &= uncertainty::decompose(&one).mutual_information.values().iter().all(|&v| v == 0.0);
    }
    outcome(
        min_mi >= 0.0 && identical_zero && single_zero,
        format!("min MI over random stacks {min_mi:.2e}; identical stacks all-zero MI/EKL/variance: {identical_zero}; T=1 zero MI: {single_zero}"),
    )
}

fn tta_round_trip() -> Outcome {
    let mut rng = seed::rng(33);
    let random_map = Raster::from_fn(40, 30, ValueKind::Probability, |_, _| rng.random::<f64>()).unwrap();
    let flip = TransformSpec {
        hflip: true,
        ..TransformSpec::identity()
    };
    let flipped = tta::apply_transform(&random_map.clone().with_kind(ValueKind::Intensity).unwrap(), &flip)
        .unwrap()
        .with_kind(ValueKind::Probability)
        .unwrap();
    let flip_exact = tta::invert_spatial(&flipped, &flip).unwrap() == random_map;

    // Smooth map; interior band = the central half of each axis.
    let (w, h) = (96usize, 96usize);
    let smooth = Raster::from_fn(w, h, ValueKind::Intensity, |x, y| {
        0.5 + 0.25 * (x as f64 / 9.0).sin() * (y as f64 / 11.0).cos() + 0.15 * ((x + y) as f64 / 17.0).cos()
    })
    .unwrap();
    let priors = AugmentationPriors::default();
    let mut worst = 0.0f64;
    for n in 0..100u64 {
        let mut spec_rng = seed::rng(seed::derive(33, n));
        let spec = tta::sample_transform(&priors, &mut spec_rng);
        // the photometric part is not invertible by design; round-trip the spatial map
        let spatial = TransformSpec {
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            noise_sigma: 0.0,
            ..spec
        };
        let forward = tta::apply_transform(&smooth, &spatial).unwrap().with_kind(ValueKind::Probability).unwrap();
        let back = tta::invert_spatial(&forward, &spatial).unwrap();
        let (mut err, mut count) = (0.0, 0usize);
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                err += (back.get(x, y) - smooth.get(x, y)).abs();
                count += 1;
            }
        }
        worst = worst.max(err / count as f64);
    }
    outcome(
        flip_exact && worst <= 0.02,
        format!("hflip bit-exact: {flip_exact}; worst interior mean abs error over 100 specs {worst:.4}"),
    )
}

fn iou_oracle() -> Outcome {
    let mut rng = seed::rng(34);
    let mut mismatches = 0;
    for _ in 0..200 {
        let density_a = rng.random_range(0.0..1.0);
        let density_b = rng.random_range(0.0..1.0);
        let a: Vec<bool> = (0..256).map(|_| rng.random_bool(density_a)).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.random_bool(density_b)).collect();
        let sa: HashSet<usize> = (0..256).filter(|&i| a[i]).collect();
        let sb: HashSet<usize> = (0..256).filter(|&i| b[i]).collect();
        let union = sa.union(&sb).count();
        let oracle = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        let (ma, mb) = (BinaryMask::new(16, 16, a).unwrap(), BinaryMask::new(16, 16, b).unwrap());
        if analysis::iou(&ma, &mb).unwrap() != oracle || analysis::iou(&mb, &ma).unwrap() != oracle {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{}/200 random 16x16 pairs match |A∩B|/|A∪B| exactly", 200 - mismatches))
}

fn sweep_area(points: &[Point]) -> f64 {
    (0..1800)
        .map(|k| {
            let (s, c) = (k as f64 * 0.1).to_radians().sin_cos();
            let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in points {
                let (u, v) = (p.x * c + p.y * s, -p.x * s + p.y * c);
                lo_u = lo_u.min(u);
                hi_u = hi_u.max(u);
                lo_v = lo_v.min(v);
                hi_v = hi_v.max(v);
            }
            (hi_u - lo_u) * (hi_v - lo_v)
        })
        .fold(f64::INFINITY, f64::min)
}

fn calipers_oracle() -> Outcome {
    let mut rng = seed::rng(35);
    let (mut worst_ratio, mut worst_rot) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(3..60);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.random_range(-50.0..50.0), rng.random_range(-20.0..20.0)))
            .collect();
        let rect = geometry::min_area_rect(&pts).unwrap();
        worst_ratio = worst_ratio.max(rect.area() / sweep_area(&pts));
        let deg = rng.random_range(0.0..360.0);
        let rotated: Vec<Point> = pts.iter().map(|p| p.rotated(deg)).collect();
        let rr = geometry::min_area_rect(&rotated).unwrap();
        worst_rot = worst_rot
            .max((rect.side_long - rr.side_long).abs())
            .max((rect.side_short - rr.side_short).abs());
    }
    outcome(
        worst_ratio <= 1.005 && worst_rot <= 1e-9,
        format!("worst area / sweep-oracle area {worst_ratio:.6}; worst side-length change under rotation {worst_rot:.2e}"),
    )
}

fn ellipse_fit_exactness() -> Outcome {
    let mut rng = seed::rng(36);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(5.0..60.0);
        let a = b * rng.random_range(1.0..2.5);
        let theta = rng.random_range(0.0..180.0f64);
        let (cx, cy) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let (s, c) = theta.to_radians().sin_cos();
        let pts: Vec<Point> = (0..64)
            .map(|k| {
                let t = k as f64 / 64.0 * std::f64::consts::TAU;
                let (u, v) = (a * t.cos(), b * t.sin());
                Point::new(cx + u * c - v * s, cy + u * s + v * c)
            })
            .collect();
        let fit = geometry::fit_ellipse(&pts).unwrap();
        let rel = [
            (fit.semi_major - a).abs() / a,
            (fit.semi_minor - b).abs() / b,
            (fit.center.x - cx).abs() / a,
            (fit.center.y - cy).abs() / a,
        ];
        worst = rel.iter().cloned().fold(worst, f64::max);
    }
    outcome(worst <= 1e-3, format!("50 configurations, worst relative error {worst:.2e}"))
}

fn uncertainty_error_rise() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    let config = DatasetConfig {
        noise_sigma: 0.15,
        ..DatasetConfig::default()
    };
    phantom::generate_dataset(Modality::Head, 30, 11, &config, &data).unwrap();
    pipeline::run(&data, &out, &RunConfig::default(), &options(Provenance::Tta, 8, 11)).unwrap();
    let cases = pipeline::load_results(&out).unwrap();
    let report = pipeline::histogram_for(&cases, analysis::DEFAULT_UNCERTAINTY_BIN_WIDTH).unwrap().unwrap();
    match report.histogram.curve_extremes() {
        Some((bottom, top)) => outcome(
            top > bottom,
            format!("data-uncertainty curve over {} images: bottom bin {bottom:.4}, top bin {top:.4}", report.histogram.images),
        ),
        None => outcome(false, "histogram is empty".into()),
    }
}

fn write_noise_dataset(dir: &Path, count: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for i in 0..count {
        let mut rng = seed::rng(seed::derive(seed, i as u64));
        let img = Raster::from_fn(192, 192, ValueKind::Intensity, |_, _| rng.random::<f64>()).unwrap();
        let name = format!("noise_{i:04}.pgm");
        formats::save_image(&img, &dir.join(&name)).unwrap();
        entries.push(DatasetEntry {
            case_id: format!("noise_{i:04}"),
            image: name.into(),
            mask: None,
            pixel_size_mm: 0.1,
            modality: Modality::Unknown,
            gt_measurement_mm: None,
        });
    }
    fs::write(dir.join(phantom::DATASET_INDEX), serde_json::to_vec_pretty(&entries).unwrap()).unwrap();
}

fn ood_separation() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let phantoms = tmp.path().join("phantoms");
    let noise = tmp.path().join("noise");
    phantom::generate_dataset(Modality::Head, 10, 12, &DatasetConfig::default(), &phantoms).unwrap();
    write_noise_dataset(&noise, 10, 12);
    let opts = options(Provenance::Tta, 8, 12);

    let in_domain = pipeline::run(&phantoms, &tmp.path().join("in"), &RunConfig::default(), &opts).unwrap();
    assert_eq!(in_domain.ood_threshold_source, Some(ThresholdSource::Run));
    let threshold = in_domain.ood_threshold.unwrap();
    let config = RunConfig {
        ood_threshold: Some(threshold),
        ..RunConfig::default()
    };
    pipeline::run(&noise, &tmp.path().join("ood"), &config, &opts).unwrap();

    let scores = |dir: &Path| -> Vec<(f64, bool)> {
        pipeline::load_results(dir)
            .unwrap()
            .iter()
            .map(|c| (c.record.uncertainty_score, c.record.ood_flag))
            .collect()
    };
    let (inside, outside) = (scores(&tmp.path().join("in")), scores(&tmp.path().join("ood")));
    let mean = |v: &[(f64, bool)]| v.iter().map(|s| s.0).sum::<f64>() / v.len() as f64;
    let flagged = outside.iter().filter(|s| s.1).count();
    outcome(
        outside.len() == 10 && mean(&outside) > mean(&inside) && flagged == 10,
        format!(
            "mean score noise {:.4} vs phantoms {:.4}; threshold {threshold:.4}; {flagged}/10 noise images flagged",
            mean(&outside),
            mean(&inside)
        ),
    )
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_uqseg");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let status = Command::new(bin)
        .args(["phantom", "--kind", "head", "--count", "4", "--seed", "5", "--out"])
        .arg(&data)
        .output()
        .unwrap()
        .status;
    if !status.success() {
        return outcome(false, format!("phantom generation failed: {status}"));
    }
    let mut trees = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let out = tmp.path().join(name);
        let status = Command::new(bin)
            .args(["run", "--method", "tta", "--samples", "8", "--seed", "42", "--workers", workers, "--dataset"])
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return outcome(false, format!("uqseg run failed: {status}"));
        }
        trees.push(tree_bytes(&out));
    }
    let identical = trees[0] == trees[1];
    outcome(identical, format!("two runs, {} files each, byte-identical: {identical}", trees[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("phantom head-circumference recovery", head_circumference_recovery),
        ("phantom femur-length recovery", femur_length_recovery),
        ("decomposition identity", decomposition_identity),
        ("MI nonnegativity and degeneracies", mi_nonnegativity_and_degeneracies),
        ("TTA round-trip", tta_round_trip),
        ("IOU oracle equivalence", iou_oracle),
        ("calipers oracle", calipers_oracle),
        ("ellipse-fit exactness", ellipse_fit_exactness),
        ("uncertainty/error-rate sharp rise", uncertainty_error_rise),
        ("OOD separation", ood_separation),
        ("run reproducibility", reproducibility),
    ];
    let mut passed = 0;
    for (name, check) in criteria {
        let result = check();
        println!("{} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        passed += result.pass as usize;
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
