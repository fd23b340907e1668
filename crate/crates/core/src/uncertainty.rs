//! Per-pixel uncertainty measures over a [`SampleStack`].
//!
//! All logarithms are base 2 and every `log` argument is clamped below at
//! [`EPSILON`], identically in entropy, mutual information and EKL, so
//! `total = expected + mutual_information` survives the clamping.
//!
//! The pixel-level functions take general `K`-class distributions; the
//! raster-level [`decompose`] uses `K = 2` with `p = (1 - y, y)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Raster, ValueKind};
use crate::tta::{aggregate_mean, sample_mean, SampleStack};

pub const EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("distribution must be non-empty")]
    Empty,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("samples disagree on the number of classes")]
    RaggedSamples,
}

/// A validated categorical distribution over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDistribution(Vec<f64>);

impl PixelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, UncertaintyError> {
        if probs.is_empty() {
            return Err(UncertaintyError::Empty);
        }
        if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(UncertaintyError::OutOfRange(p));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(UncertaintyError::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    /// `(background, foreground)` for a foreground probability `y`.
    pub fn binary(foreground: f64) -> Result<Self, UncertaintyError> {
        Self::new(vec![1.0 - foreground, foreground])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
fn log2_clamped(p: f64) -> f64 {
    p.max(EPSILON).log2()
}

/// `H(p) = -sum p_k log2 p_k` in bits, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().map(|&pk| if pk > 0.0 { -pk * log2_clamped(pk) } else { 0.0 }).sum();
    h.max(0.0)
}

pub fn max_probability(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `KL(p || q) = sum p_k log2(p_k / q_k)`, clamped at 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let d: f64 = p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| if pk > 0.0 { pk * (log2_clamped(pk) - log2_clamped(qk)) } else { 0.0 })
        .sum();
    d.max(0.0)
}

/// Every measure for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelUncertainty {
    pub total_entropy: f64,
    pub expected_entropy: f64,
    pub mutual_information: f64,
    pub ekl: f64,
    /// Population variance of the last class (the foreground for `K = 2`).
    pub variance: f64,
    pub max_prob: f64,
}

/// Classwise mean of `samples`.
pub fn expected_distribution(samples: &[Vec<f64>]) -> Result<Vec<f64>, UncertaintyError> {
    let k = samples.first().ok_or(UncertaintyError::Empty)?.len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(UncertaintyError::RaggedSamples);
    }
    let mut column = vec![0.0; samples.len()];
    Ok((0..k)
        .map(|class| {
            for (slot, s) in column.iter_mut().zip(samples) {
                *slot = s[class];
            }
            sample_mean(&column)
        })
        .collect())
}

/// Decomposes the uncertainty of `T` sampled distributions at one pixel.
pub fn decompose_pixel(samples: &[Vec<f64>]) -> Result<PixelUncertainty, UncertaintyError> {
    let expected = expected_distribution(samples)?;
    let total = entropy(&expected);
    let entropies: Vec<f64> = samples.iter().map(|s| entropy(s)).collect();
    let expected_entropy = sample_mean(&entropies);
    let kls: Vec<f64> = samples.iter().map(|s| kl_divergence(&expected, s)).collect();
    let last = expected.len() - 1;
    let sq: Vec<f64> = samples.iter().map(|s| (s[last] - expected[last]).powi(2)).collect();
    Ok(PixelUncertainty {
        total_entropy: total,
        expected_entropy,
        mutual_information: (total - expected_entropy).max(0.0),
        ekl: sample_mean(&kls),
        variance: sample_mean(&sq),
        max_prob: max_probability(&expected),
    })
}

/// Mutual information by the second route, `mean_i KL(p_i || p_hat)`.
pub fn mutual_information_kl_pixel(samples: &[Vec<f64>]) -> Result<f64, UncertaintyError> {
    let expected = expected_distribution(samples)?;
    let kls: Vec<f64> = samples.iter().map(|s| kl_divergence(s, &expected)).collect();
    Ok(sample_mean(&kls))
}

/// The per-pixel uncertainty rasters of one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub total_entropy: Raster,
    /// Data (aleatoric) uncertainty.
    pub expected_entropy: Raster,
    /// Model (epistemic) uncertainty.
    pub mutual_information: Raster,
    pub ekl: Raster,
    pub variance: Raster,
    pub max_prob: Raster,
    /// Expected foreground probability.
    pub mean_prob: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Total,
    Data,
    Model,
}

impl UncertaintyMaps {
    pub fn select(&self, kind: ScoreKind) -> &Raster {
        match kind {
            ScoreKind::Total => &self.total_entropy,
            ScoreKind::Data => &self.expected_entropy,
            ScoreKind::Model => &self.mutual_information,
        }
    }
}

/// Same as [`aggregate_mean`].
pub fn expected_softmax(stack: &SampleStack) -> Raster {
    aggregate_mean(stack)
}

fn binary_samples(values: &[f64], buf: &mut Vec<Vec<f64>>) {
    buf.resize_with(values.len(), || vec![0.0; 2]);
    for (slot, &y) in buf.iter_mut().zip(values) {
        slot[0] = 1.0 - y;
        slot[1] = y;
    }
}

pub fn decompose(stack: &SampleStack) -> UncertaintyMaps {
    let n = stack.maps()[0].len();
    let mut cols: [Vec<f64>; 6] = Default::default();
    for c in cols.iter_mut() {
        c.reserve(n);
    }
    let mut buf = Vec::new();
    stack.for_each_pixel(|values| {
        binary_samples(values, &mut buf);
        let u = decompose_pixel(&buf).expect("binary samples are well formed");
        cols[0].push(u.total_entropy);
        cols[1].push(u.expected_entropy);
        cols[2].push(u.mutual_information);
        cols[3].push(u.ekl);
        cols[4].push(u.variance);
        cols[5].push(u.max_prob);
    });
    let (w, h) = (stack.width(), stack.height());
    let [total, expected, mi, ekl, var, maxp] = cols;
    let raster = |v: Vec<f64>| Raster::new(w, h, v, ValueKind::Uncertainty).expect("measures are nonnegative");
    UncertaintyMaps {
        total_entropy: raster(total),
        expected_entropy: raster(expected),
        mutual_information: raster(mi),
        ekl: raster(ekl),
        variance: raster(var),
        max_prob: raster(maxp),
        mean_prob: aggregate_mean(stack),
    }
}

/// Per-pixel `mean_i KL(p_hat || p_i)`.
pub fn ekl(stack: &SampleStack) -> Raster {
    decompose(stack).ekl
}

/// Per-pixel population variance of the foreground probability.
pub fn variance(stack: &SampleStack) -> Raster {
    let mut out = Vec::with_capacity(stack.maps()[0].len());
    stack.for_each_pixel(|v| {
        let mean = sample_mean(v);
        let sq: Vec<f64> = v.iter().map(|y| (y - mean).powi(2)).collect();
        out.push(sample_mean(&sq));
    });
    Raster::new(stack.width(), stack.height(), out, ValueKind::Uncertainty).expect("variance is nonnegative")
}

/// Mutual information via `mean_i KL(p_i || p_hat)`, independent of [`decompose`].
pub fn mutual_information_kl(stack: &SampleStack) -> Raster {
    let mut out = Vec::with_capacity(stack.maps()[0].len());
    let mut buf = Vec::new();
    stack.for_each_pixel(|values| {
        binary_samples(values, &mut buf);
        out.push(mutual_information_kl_pixel(&buf).expect("binary samples are well formed"));
    });
    Raster::new(stack.width(), stack.height(), out, ValueKind::Uncertainty).expect("KL is nonnegative")
}

/// Whole-image mean of the selected uncertainty raster.
pub fn image_uncertainty_score(maps: &UncertaintyMaps, kind: ScoreKind) -> f64 {
    maps.select(kind).mean()
}
