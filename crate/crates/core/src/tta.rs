//! Test-time augmentation: sample a transform, apply it to the image,
//! predict, warp the prediction back onto the original grid, and aggregate
//! the resulting Monte Carlo stack.
//!
//! The spatial part of a transform is a single affine map about the raster
//! center `c = ((w-1)/2, (h-1)/2)`:
//!
//! ```text
//! F(p) = c + s * R(theta) * Flip * (p - c) + t
//! ```
//!
//! An augmented image is `X(q) = X0(F^-1(q))`; a prediction `Y` made on it
//! is returned to the original grid as `Y0(p) = Y(F(p))`. Both directions
//! are one bilinear resampling with zero fill outside the source.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{PredictMode, Predictor, PredictorError};
use crate::raster::{BinaryMask, Raster, RasterError, ValueKind};
use crate::seed;

pub const DEFAULT_SAMPLES: usize = 8;

pub const SCALE_BOUNDS: (f64, f64) = (0.5, 2.0);
pub const TRANSLATE_BOUND: f64 = 0.25;
pub const CONTRAST_BOUNDS: (f64, f64) = (0.25, 4.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("invalid transform: {0}")]
    InvalidSpec(String),
    #[error("invalid augmentation priors: {0}")]
    InvalidPriors(String),
}

/// One sampled augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub hflip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation as a fraction of (width, height).
    pub translate_frac: (f64, f64),
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub noise_sigma: f64,
    /// Seed for the additive noise field.
    pub noise_seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            translate_frac: (0.0, 0.0),
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let bad = |m: String| Err(TransformError::InvalidSpec(m));
        if !(SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&self.scale) {
            return bad(format!("scale {} outside {:?}", self.scale, SCALE_BOUNDS));
        }
        let (dx, dy) = self.translate_frac;
        if !(dx.abs() <= TRANSLATE_BOUND && dy.abs() <= TRANSLATE_BOUND) {
            return bad(format!("translation ({dx}, {dy}) exceeds {TRANSLATE_BOUND}"));
        }
        if !(CONTRAST_BOUNDS.0..=CONTRAST_BOUNDS.1).contains(&self.contrast_factor) {
            return bad(format!("contrast {} outside {:?}", self.contrast_factor, CONTRAST_BOUNDS));
        }
        if !self.rotation_deg.is_finite() || !self.brightness_delta.is_finite() {
            return bad("rotation and brightness must be finite".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative".into());
        }
        Ok(())
    }

    fn is_spatial_identity(&self) -> bool {
        !self.hflip
            && self.rotation_deg == 0.0
            && self.scale == 1.0
            && self.translate_frac == (0.0, 0.0)
    }

    fn is_flip_only(&self) -> bool {
        self.hflip && self.rotation_deg == 0.0 && self.scale == 1.0 && self.translate_frac == (0.0, 0.0)
    }

    fn is_photometric_identity(&self) -> bool {
        self.brightness_delta == 0.0 && self.contrast_factor == 1.0
    }

    /// The forward spatial map `F` for a `width x height` grid.
    pub fn forward_map(&self, width: usize, height: usize) -> Affine {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let flip = if self.hflip { -1.0 } else { 1.0 };
        // scale * R * Flip
        let m = [
            [self.scale * c * flip, -self.scale * s],
            [self.scale * s * flip, self.scale * c],
        ];
        let tx = self.translate_frac.0 * width as f64;
        let ty = self.translate_frac.1 * height as f64;
        Affine {
            m,
            offset: [
                cx + tx - (m[0][0] * cx + m[0][1] * cy),
                cy + ty - (m[1][0] * cx + m[1][1] * cy),
            ],
        }
    }
}

/// `p -> m * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Affine {
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.offset[0],
            self.m[1][0] * x + self.m[1][1] * y + self.offset[1],
        )
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let [ox, oy] = self.offset;
        Some(Affine {
            m: inv,
            offset: [
                -(inv[0][0] * ox + inv[0][1] * oy),
                -(inv[1][0] * ox + inv[1][1] * oy),
            ],
        })
    }
}

/// Bilinear sample at `(x, y)`; neighbors outside the grid read as 0.
#[inline]
pub fn bilinear(values: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as isize || yi >= height as isize {
            0.0
        } else {
            values[yi as usize * width + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// `out(p) = src(sample_at(p))`.
fn warp(src: &Raster, sample_at: &Affine) -> Vec<f64> {
    let (w, h) = (src.width(), src.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = sample_at.apply(x as f64, y as f64);
            out.push(bilinear(src.values(), w, h, sx, sy));
        }
    }
    out
}

fn hflip_values(src: &Raster) -> Vec<f64> {
    let w = src.width();
    src.values()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Applies the spatial transform, then contrast/brightness, then noise.
pub fn apply_transform(image: &Raster, spec: &TransformSpec) -> Result<Raster, TransformError> {
    image
        .expect_kind(ValueKind::Intensity)
        .map_err(|e| TransformError::InvalidSpec(e.to_string()))?;
    spec.validate()?;
    let (w, h) = (image.width(), image.height());
    let mut values = if spec.is_spatial_identity() {
        image.values().to_vec()
    } else if spec.is_flip_only() {
        hflip_values(image)
    } else {
        let inverse = spec
            .forward_map(w, h)
            .inverse()
            .ok_or_else(|| TransformError::InvalidSpec("non-invertible spatial map".into()))?;
        warp(image, &inverse)
    };
    if !spec.is_photometric_identity() {
        for v in values.iter_mut() {
            *v = (spec.contrast_factor * (*v - 0.5) + 0.5 + spec.brightness_delta).clamp(0.0, 1.0);
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| TransformError::InvalidSpec(e.to_string()))?;
        let mut rng = seed::rng(spec.noise_seed);
        for v in values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Raster::new_clamped(w, h, values, ValueKind::Intensity).map_err(|e| TransformError::InvalidSpec(e.to_string()))
}

/// Warps a prediction made on an augmented image back onto the original grid.
/// Photometric parts and noise are not inverted.
pub fn invert_spatial(probmap: &Raster, spec: &TransformSpec) -> Result<Raster, TransformError> {
    probmap
        .expect_kind(ValueKind::Probability)
        .map_err(|e| TransformError::InvalidSpec(e.to_string()))?;
    spec.validate()?;
    let (w, h) = (probmap.width(), probmap.height());
    let values = if spec.is_spatial_identity() {
        return Ok(probmap.clone());
    } else if spec.is_flip_only() {
        hflip_values(probmap)
    } else {
        warp(probmap, &spec.forward_map(w, h))
    };
    Raster::new_clamped(w, h, values, ValueKind::Probability).map_err(|e| TransformError::InvalidSpec(e.to_string()))
}

/// Sampling distributions for [`TransformSpec`]. Ranges are `(low, high)`
/// and sampled uniformly; the translation range applies to each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPriors {
    pub flip_prob: f64,
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub translate_frac: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for AugmentationPriors {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_deg: (-15.0, 15.0),
            scale: (0.9, 1.1),
            translate_frac: (-0.05, 0.05),
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            noise_sigma: 0.01,
        }
    }
}

impl AugmentationPriors {
    /// Priors that always produce `spec` (flip included iff `spec.hflip`).
    /// Both axes share one translation range, so the drawn translation is
    /// `(dx, dx)` with `dx = spec.translate_frac.0`.
    pub fn degenerate(spec: &TransformSpec) -> Self {
        Self {
            flip_prob: if spec.hflip { 1.0 } else { 0.0 },
            rotation_deg: (spec.rotation_deg, spec.rotation_deg),
            scale: (spec.scale, spec.scale),
            translate_frac: (spec.translate_frac.0, spec.translate_frac.0),
            brightness: (spec.brightness_delta, spec.brightness_delta),
            contrast: (spec.contrast_factor, spec.contrast_factor),
            noise_sigma: spec.noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let check = |name: &str, (lo, hi): (f64, f64), bounds: (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= bounds.0 && hi <= bounds.1) {
                Err(TransformError::InvalidPriors(format!(
                    "{name} range ({lo}, {hi}) must be ordered and inside {bounds:?}"
                )))
            } else {
                Ok(())
            }
        };
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TransformError::InvalidPriors("flip_prob must lie in [0, 1]".into()));
        }
        check("rotation_deg", self.rotation_deg, (f64::MIN, f64::MAX))?;
        check("scale", self.scale, SCALE_BOUNDS)?;
        check("translate_frac", self.translate_frac, (-TRANSLATE_BOUND, TRANSLATE_BOUND))?;
        check("brightness", self.brightness, (f64::MIN, f64::MAX))?;
        check("contrast", self.contrast, CONTRAST_BOUNDS)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TransformError::InvalidPriors("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one transform from `priors`.
pub fn sample_transform(priors: &AugmentationPriors, rng: &mut impl Rng) -> TransformSpec {
    let hflip = rng.random::<f64>() < priors.flip_prob;
    let rotation_deg = uniform(rng, priors.rotation_deg);
    let scale = uniform(rng, priors.scale);
    let dx = uniform(rng, priors.translate_frac);
    let dy = uniform(rng, priors.translate_frac);
    let brightness_delta = uniform(rng, priors.brightness);
    let contrast_factor = uniform(rng, priors.contrast);
    let noise_seed = rng.next_u64();
    TransformSpec {
        hflip,
        rotation_deg,
        scale,
        translate_frac: (dx, dy),
        brightness_delta,
        contrast_factor,
        noise_sigma: priors.noise_sigma,
        noise_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Baseline,
    Tta,
    Mcd,
}

/// `T >= 1` aligned probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    maps: Vec<Raster>,
    provenance: Provenance,
    specs: Vec<TransformSpec>,
    seed: u64,
}

impl SampleStack {
    pub fn new(
        maps: Vec<Raster>,
        provenance: Provenance,
        specs: Vec<TransformSpec>,
        seed: u64,
    ) -> Result<Self, RasterError> {
        let first = maps.first().ok_or(RasterError::EmptyDimensions { width: 0, height: 0 })?;
        for map in &maps {
            map.expect_kind(ValueKind::Probability)?;
            if !map.same_dims(first) {
                return Err(RasterError::DimensionMismatch {
                    a_width: first.width(),
                    a_height: first.height(),
                    b_width: map.width(),
                    b_height: map.height(),
                });
            }
        }
        Ok(Self {
            maps,
            provenance,
            specs,
            seed,
        })
    }

    pub fn maps(&self) -> &[Raster] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.maps[0].width()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Calls `f` with the `T` sample values of every pixel, in row-major order.
    pub fn for_each_pixel(&self, mut f: impl FnMut(&[f64])) {
        let mut buf = vec![0.0; self.maps.len()];
        for i in 0..self.maps[0].len() {
            for (slot, map) in buf.iter_mut().zip(&self.maps) {
                *slot = map.values()[i];
            }
            f(&buf);
        }
    }
}

/// Arithmetic mean that returns the common value exactly when all inputs
/// are equal, and never leaves `[min, max]` of the inputs.
pub fn sample_mean(values: &[f64]) -> f64 {
    let first = values[0];
    let (mut lo, mut hi, mut sum) = (first, first, 0.0);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    if lo == hi {
        first
    } else {
        (sum / values.len() as f64).clamp(lo, hi)
    }
}

/// Pixelwise mean of the stack.
pub fn aggregate_mean(stack: &SampleStack) -> Raster {
    let mut out = Vec::with_capacity(stack.maps()[0].len());
    stack.for_each_pixel(|v| out.push(sample_mean(v)));
    Raster::new(stack.width(), stack.height(), out, ValueKind::Probability)
        .expect("mean of probabilities is a probability")
}

/// Pixelwise majority vote of `y > threshold`; an exact tie is background.
pub fn aggregate_mode(stack: &SampleStack, threshold: f64) -> BinaryMask {
    let t = stack.len();
    let mut bits = Vec::with_capacity(stack.maps()[0].len());
    stack.for_each_pixel(|v| {
        let votes = v.iter().filter(|&&y| y > threshold).count();
        bits.push(2 * votes > t);
    });
    BinaryMask::new(stack.width(), stack.height(), bits).expect("stack dimensions are valid")
}

#[derive(Debug, Error)]
pub enum TtaError {
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Builds a TTA stack: `y_n = invert(predict(apply(image, spec_n)), spec_n)`
/// with `spec_n` drawn from an RNG seeded by `derive(seed, n)`.
pub fn tta_sample_stack(
    predictor: &dyn Predictor,
    image: &Raster,
    samples: usize,
    priors: &AugmentationPriors,
    seed: u64,
) -> Result<SampleStack, TtaError> {
    if samples == 0 {
        return Err(TransformError::InvalidPriors("sample count must be at least 1".into()).into());
    }
    priors.validate()?;
    let mut maps = Vec::with_capacity(samples);
    let mut specs = Vec::with_capacity(samples);
    for n in 0..samples {
        let mut rng = seed::rng(seed::derive(seed, n as u64));
        let spec = sample_transform(priors, &mut rng);
        let augmented = apply_transform(image, &spec)?;
        let predicted = predictor
            .predict(&augmented, PredictMode::Deterministic)
            .map_err(|e| PredictorError::Sample {
                index: n,
                source: Box::new(e),
            })?;
        if !predicted.same_dims(image) {
            return Err(PredictorError::Sample {
                index: n,
                source: Box::new(PredictorError::DimensionMismatch {
                    width: image.width(),
                    height: image.height(),
                    got_width: predicted.width(),
                    got_height: predicted.height(),
                }),
            }
            .into());
        }
        maps.push(invert_spatial(&predicted, &spec)?);
        specs.push(spec);
    }
    Ok(SampleStack::new(maps, Provenance::Tta, specs, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{SigmoidParams, SigmoidPredictor};

    fn intensity(values: Vec<f64>, w: usize, h: usize) -> Raster {
        Raster::new(w, h, values, ValueKind::Intensity).unwrap()
    }

    fn prob(values: Vec<f64>, w: usize, h: usize) -> Raster {
        Raster::new(w, h, values, ValueKind::Probability).unwrap()
    }

    fn stack(maps: Vec<Raster>) -> SampleStack {
        SampleStack::new(maps, Provenance::Mcd, Vec::new(), 0).unwrap()
    }

    fn gradient(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, ValueKind::Intensity, |x, y| {
            (x as f64 * 0.013 + y as f64 * 0.007).sin().abs()
        })
        .unwrap()
    }

    #[test]
    fn degenerate_priors_reproduce_the_point_values() {
        let spec = TransformSpec {
            hflip: false,
            rotation_deg: 3.0,
            scale: 1.05,
            translate_frac: (0.01, 0.01),
            brightness_delta: -0.02,
            contrast_factor: 1.1,
            noise_sigma: 0.0,
            noise_seed: 0,
        };
        let priors = AugmentationPriors::degenerate(&spec);
        let mut rng = seed::rng(5);
        let drawn = sample_transform(&priors, &mut rng);
        assert_eq!(TransformSpec { noise_seed: 0, ..drawn }, spec);
    }

    #[test]
    fn flip_prob_one_always_flips() {
        let priors = AugmentationPriors {
            flip_prob: 1.0,
            ..AugmentationPriors::default()
        };
        let mut rng = seed::rng(1);
        assert!((0..200).all(|_| sample_transform(&priors, &mut rng).hflip));
    }

    #[test]
    fn rotation_draws_are_centered() {
        let priors = AugmentationPriors::default();
        let mut rng = seed::rng(2024);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_transform(&priors, &mut rng).rotation_deg)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.5, "mean rotation {mean}");
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = gradient(17, 11);
        assert_eq!(apply_transform(&img, &TransformSpec::identity()).unwrap(), img);
        let p = img.clone().with_kind(ValueKind::Probability).unwrap();
        assert_eq!(invert_spatial(&p, &TransformSpec::identity()).unwrap(), p);
    }

    #[test]
    fn hflip_reverses_rows() {
        let img = intensity(vec![0.1, 0.2, 0.3, 0.4], 2, 2);
        let spec = TransformSpec {
            hflip: true,
            ..TransformSpec::identity()
        };
        assert_eq!(apply_transform(&img, &spec).unwrap().values(), &[0.2, 0.1, 0.4, 0.3]);
        let p = prob(vec![0.1, 0.2, 0.3, 0.4], 2, 2);
        let back = invert_spatial(&invert_spatial(&p, &spec).unwrap(), &spec).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn brightness_clamps() {
        let img = intensity(vec![0.95], 1, 1);
        let spec = TransformSpec {
            brightness_delta: 0.1,
            ..TransformSpec::identity()
        };
        assert_eq!(apply_transform(&img, &spec).unwrap().values(), &[1.0]);
    }

    #[test]
    fn flip_matches_general_warp() {
        // A flip routed through the bilinear path lands on pixel centers.
        let img = gradient(9, 7);
        let spec = TransformSpec {
            hflip: true,
            ..TransformSpec::identity()
        };
        let inverse = spec.forward_map(9, 7).inverse().unwrap();
        let warped = warp(&img, &inverse);
        let flipped = hflip_values(&img);
        for (a, b) in warped.iter().zip(&flipped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = gradient(20, 10);
        let spec = TransformSpec {
            translate_frac: (0.1, 0.0),
            ..TransformSpec::identity()
        };
        let out = apply_transform(&img, &spec).unwrap();
        for y in 0..10 {
            assert_eq!(out.get(0, y), 0.0);
            assert_eq!(out.get(1, y), 0.0);
            for x in 2..20 {
                assert!((out.get(x, y) - img.get(x - 2, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_round_trip_on_smooth_map() {
        let (w, h) = (64, 64);
        let map = Raster::from_fn(w, h, ValueKind::Probability, |x, y| {
            0.5 + 0.4 * (x as f64 / 9.0).sin() * (y as f64 / 11.0).cos()
        })
        .unwrap();
        let spec = TransformSpec {
            rotation_deg: 30.0,
            ..TransformSpec::identity()
        };
        let forward = apply_transform(&map.clone().with_kind(ValueKind::Intensity).unwrap(), &spec)
            .unwrap()
            .with_kind(ValueKind::Probability)
            .unwrap();
        let back = invert_spatial(&forward, &spec).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 10..h - 10 {
            for x in 10..w - 10 {
                err += (back.get(x, y) - map.get(x, y)).abs();
                n += 1;
            }
        }
        assert!(err / (n as f64) <= 0.02, "mean round-trip error {}", err / n as f64);
    }

    #[test]
    fn mean_and_mode_examples() {
        let s = stack(vec![prob(vec![0.2], 1, 1), prob(vec![0.6], 1, 1)]);
        assert!((aggregate_mean(&s).values()[0] - 0.4).abs() < 1e-15);

        let same = stack(vec![prob(vec![0.1, 0.7], 2, 1); 3]);
        assert_eq!(aggregate_mean(&same).values(), &[0.1, 0.7]);

        let votes = stack(vec![prob(vec![0.9], 1, 1), prob(vec![0.8], 1, 1), prob(vec![0.1], 1, 1)]);
        assert!(aggregate_mode(&votes, 0.5).get(0, 0));
        let tie = stack(vec![prob(vec![0.9], 1, 1), prob(vec![0.1], 1, 1)]);
        assert!(!aggregate_mode(&tie, 0.5).get(0, 0));
        let low = stack(vec![prob(vec![0.2, 0.5], 2, 1); 4]);
        assert!(aggregate_mode(&low, 0.5).is_blank());
    }

    #[test]
    fn mean_matches_summation_oracle() {
        let mut rng = seed::rng(8);
        let maps: Vec<Raster> = (0..8)
            .map(|_| Raster::from_fn(6, 5, ValueKind::Probability, |_, _| rng.random::<f64>()).unwrap())
            .collect();
        let s = stack(maps.clone());
        let mean = aggregate_mean(&s);
        for i in 0..30 {
            let mut total = 0.0;
            for m in &maps {
                total += m.values()[i];
            }
            assert!((mean.values()[i] - total / 8.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn stack_rejects_mismatched_maps() {
        assert!(SampleStack::new(vec![], Provenance::Tta, vec![], 0).is_err());
        assert!(SampleStack::new(
            vec![prob(vec![0.1], 1, 1), prob(vec![0.1, 0.2], 2, 1)],
            Provenance::Tta,
            vec![],
            0
        )
        .is_err());
    }

    #[test]
    fn tta_with_degenerate_priors_equals_baseline() {
        let predictor = SigmoidPredictor::new(SigmoidParams::default()).unwrap();
        let img = gradient(24, 16);
        let baseline = predictor.predict(&img, PredictMode::Deterministic).unwrap();
        let priors = AugmentationPriors::degenerate(&TransformSpec::identity());
        let s = tta_sample_stack(&predictor, &img, 4, &priors, 3).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.maps().iter().all(|m| m == &baseline));
    }

    #[test]
    fn tta_flip_only_is_equivariant() {
        let predictor = SigmoidPredictor::new(SigmoidParams::default()).unwrap();
        let img = gradient(31, 13);
        let baseline = predictor.predict(&img, PredictMode::Deterministic).unwrap();
        let priors = AugmentationPriors {
            flip_prob: 0.5,
            ..AugmentationPriors::degenerate(&TransformSpec::identity())
        };
        let s = tta_sample_stack(&predictor, &img, 8, &priors, 77).unwrap();
        assert!(s.specs().iter().any(|sp| sp.hflip));
        assert!(s.specs().iter().any(|sp| !sp.hflip));
        for m in s.maps() {
            for (a, b) in m.values().iter().zip(baseline.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tta_is_reproducible() {
        let predictor = SigmoidPredictor::new(SigmoidParams::default()).unwrap();
        let img = gradient(20, 20);
        let priors = AugmentationPriors::default();
        let a = tta_sample_stack(&predictor, &img, 8, &priors, 42).unwrap();
        let b = tta_sample_stack(&predictor, &img, 8, &priors, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.specs().len(), DEFAULT_SAMPLES);
    }

    #[test]
    fn priors_validation() {
        assert!(AugmentationPriors::default().validate().is_ok());
        let bad = AugmentationPriors {
            scale: (0.4, 1.0),
            ..AugmentationPriors::default()
        };
        assert!(bad.validate().is_err());
        let inverted = AugmentationPriors {
            rotation_deg: (5.0, -5.0),
            ..AugmentationPriors::default()
        };
        assert!(inverted.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn mean_lies_between_min_and_max(values in proptest::collection::vec(0.0f64..=1.0, 1..10)) {
            let maps = values.iter().map(|&v| prob(vec![v], 1, 1)).collect();
            let m = aggregate_mean(&stack(maps)).values()[0];
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(m >= lo && m <= hi);
        }
    }
}
