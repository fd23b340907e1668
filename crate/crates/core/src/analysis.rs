//! Segmentation/measurement metrics, the uncertainty versus error-rate
//! histogram, out-of-domain flagging and batch reports.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Measurement;
use crate::raster::{BinaryMask, Modality, Raster, RasterError};
use crate::tta::Provenance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("reference value must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("bin width must lie in (0, 0.5], got {0}")]
    InvalidBinWidth(f64),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("no records to report")]
    EmptyRecords,
    #[error("need at least one score")]
    NoScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self, AnalysisError> {
        pred.check_same_dims(gt)?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`; 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, AnalysisError> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.iou())
}

pub fn absolute_error(x_mm: f64, mu_mm: f64) -> f64 {
    (x_mm - mu_mm).abs()
}

/// `|x - mu| / mu * 100`.
pub fn relative_error(x_mm: f64, mu_mm: f64) -> Result<f64, AnalysisError> {
    if !(mu_mm > 0.0) {
        return Err(AnalysisError::NonPositiveReference(mu_mm));
    }
    Ok((x_mm - mu_mm).abs() / mu_mm * 100.0)
}

pub const ERROR_RATE_BIN_WIDTH: f64 = 0.05;
pub const DEFAULT_UNCERTAINTY_BIN_WIDTH: f64 = 0.05;

/// Counts of (image, uncertainty bin) samples by their pixel error rate.
///
/// Uncertainty values are binned on `[0, 1]` in steps of `bin_width`
/// (`[k w, (k+1) w)`, the top bin closed and absorbing anything above 1).
/// For each image, each non-empty uncertainty bin contributes one sample:
/// the fraction of its pixels where prediction and ground truth disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncErrorHistogram {
    pub bin_width: f64,
    pub uncertainty_edges: Vec<f64>,
    pub error_rate_edges: Vec<f64>,
    /// `counts[u][e]`.
    pub counts: Vec<Vec<u64>>,
    /// `counts / total_samples`.
    pub normalized: Vec<Vec<f64>>,
    /// Mean error rate per uncertainty bin over contributing images.
    pub curve: Vec<Option<f64>>,
    /// Images contributing to each uncertainty bin.
    pub contributors: Vec<u64>,
    pub total_samples: u64,
    pub images: u64,
}

impl UncErrorHistogram {
    /// Lowest and highest uncertainty bins with a curve value.
    pub fn curve_extremes(&self) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.curve.iter().flatten().copied().collect();
        Some((*vals.first()?, *vals.last()?))
    }
}

pub fn bin_count(bin_width: f64) -> usize {
    (1.0 / bin_width - 1e-9).ceil() as usize
}

pub fn bin_index(value: f64, bin_width: f64, bins: usize) -> usize {
    ((value / bin_width).floor().max(0.0) as usize).min(bins - 1)
}

/// Per-bin `(pixels, misclassified)` counts for one image.
pub fn image_bin_tally(
    uncertainty: &Raster,
    pred: &BinaryMask,
    gt: &BinaryMask,
    bin_width: f64,
) -> Result<Vec<(u64, u64)>, AnalysisError> {
    if !(bin_width > 0.0 && bin_width <= 0.5) {
        return Err(AnalysisError::InvalidBinWidth(bin_width));
    }
    pred.check_same_dims(gt)?;
    if uncertainty.width() != pred.width() || uncertainty.height() != pred.height() {
        return Err(RasterError::DimensionMismatch {
            a_width: uncertainty.width(),
            a_height: uncertainty.height(),
            b_width: pred.width(),
            b_height: pred.height(),
        }
        .into());
    }
    let bins = bin_count(bin_width);
    let mut tally = vec![(0u64, 0u64); bins];
    for ((&u, &p), &g) in uncertainty.values().iter().zip(pred.bits()).zip(gt.bits()) {
        let slot = &mut tally[bin_index(u, bin_width, bins)];
        slot.0 += 1;
        if p != g {
            slot.1 += 1;
        }
    }
    Ok(tally)
}

pub struct HistogramCase<'a> {
    pub uncertainty: &'a Raster,
    pub pred: &'a BinaryMask,
    pub gt: &'a BinaryMask,
}

pub fn unc_error_histogram(cases: &[HistogramCase<'_>], bin_width: f64) -> Result<UncErrorHistogram, AnalysisError> {
    if !(bin_width > 0.0 && bin_width <= 0.5) {
        return Err(AnalysisError::InvalidBinWidth(bin_width));
    }
    let bins = bin_count(bin_width);
    let rate_bins = bin_count(ERROR_RATE_BIN_WIDTH);
    let mut counts = vec![vec![0u64; rate_bins]; bins];
    let mut rate_sums = vec![0.0f64; bins];
    let mut contributors = vec![0u64; bins];
    let mut total = 0u64;
    for case in cases {
        let tally = image_bin_tally(case.uncertainty, case.pred, case.gt, bin_width)?;
        for (k, &(pixels, wrong)) in tally.iter().enumerate() {
            if pixels == 0 {
                continue;
            }
            let rate = wrong as f64 / pixels as f64;
            counts[k][bin_index(rate, ERROR_RATE_BIN_WIDTH, rate_bins)] += 1;
            rate_sums[k] += rate;
            contributors[k] += 1;
            total += 1;
        }
    }
    let curve = rate_sums
        .iter()
        .zip(&contributors)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    let normalized = counts
        .iter()
        .map(|row| row.iter().map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 }).collect())
        .collect();
    let edges = |w: f64, n: usize| (0..=n).map(|k| (k as f64 * w).min(1.0)).collect::<Vec<_>>();
    Ok(UncErrorHistogram {
        bin_width,
        uncertainty_edges: edges(bin_width, bins),
        error_rate_edges: edges(ERROR_RATE_BIN_WIDTH, rate_bins),
        counts,
        normalized,
        curve,
        contributors,
        total_samples: total,
        images: cases.len() as u64,
    })
}

/// `score > threshold`.
pub fn ood_flag(score: f64, threshold: f64) -> Result<bool, AnalysisError> {
    if !(threshold > 0.0) {
        return Err(AnalysisError::InvalidThreshold(threshold));
    }
    Ok(score > threshold)
}

/// `mean + 2 * stddev` (population) of in-domain scores.
pub fn ood_threshold(in_domain_scores: &[f64]) -> Result<f64, AnalysisError> {
    if in_domain_scores.is_empty() {
        return Err(AnalysisError::NoScores);
    }
    let n = in_domain_scores.len() as f64;
    let mean = in_domain_scores.iter().sum::<f64>() / n;
    let var = in_domain_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + 2.0 * var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecisionState {
    Pending,
    Accepted,
    Overridden { value_mm: f64, note: String },
    Rejected,
}

impl DecisionState {
    pub fn label(&self) -> &'static str {
        match self {
            DecisionState::Pending => "pending",
            DecisionState::Accepted => "accepted",
            DecisionState::Overridden { .. } => "overridden",
            DecisionState::Rejected => "rejected",
        }
    }
}

/// Output files of one case, relative to its case directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
    pub mask: PathBuf,
    pub mean_prob: PathBuf,
    pub total: PathBuf,
    pub data: PathBuf,
    pub model: PathBuf,
    pub ekl: PathBuf,
    pub variance: PathBuf,
    pub max_prob: PathBuf,
    pub samples: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub total: f64,
    pub data: f64,
    pub model: f64,
}

/// Everything the pipeline knows about one processed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub modality: Modality,
    pub pixel_size_mm: f64,
    #[serde(default)]
    pub gt_measurement_mm: Option<f64>,
    pub method: Provenance,
    pub samples: usize,
    pub seed: u64,
    pub threshold: f64,
    pub width: usize,
    pub height: usize,
    pub files: CaseFiles,
    #[serde(default)]
    pub measurement: Option<Measurement>,
    /// Why no measurement was produced, when it was not.
    #[serde(default)]
    pub flag_reason: Option<String>,
    #[serde(default)]
    pub iou: Option<f64>,
    #[serde(default)]
    pub abs_error_mm: Option<f64>,
    #[serde(default)]
    pub rel_error_pct: Option<f64>,
    /// Whole-image mean total entropy.
    pub uncertainty_score: f64,
    pub scores: ScoreSet,
    pub ood_threshold: f64,
    pub ood_flag: bool,
    pub decision: DecisionState,
}

impl CaseRecord {
    pub fn measurement_mm(&self) -> Option<f64> {
        self.measurement.map(|m| m.value_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub modality: Modality,
    pub method: Provenance,
    pub n: usize,
    pub mean_iou: Option<f64>,
    pub mean_abs_err_mm: Option<f64>,
    pub mean_rel_err_pct: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str = "modality,method,n,mean_iou,mean_abs_err_mm,mean_rel_err_pct";

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row per (modality, method), in a fixed order.
pub fn batch_report(records: &[CaseRecord]) -> Result<Vec<ReportRow>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyRecords);
    }
    let mut groups: BTreeMap<(Modality, u8), Vec<&CaseRecord>> = BTreeMap::new();
    for r in records {
        let method_rank = match r.method {
            Provenance::Baseline => 0,
            Provenance::Tta => 1,
            Provenance::Mcd => 2,
        };
        groups.entry((r.modality, method_rank)).or_default().push(r);
    }
    Ok(groups
        .into_values()
        .map(|rs| ReportRow {
            modality: rs[0].modality,
            method: rs[0].method,
            n: rs.len(),
            mean_iou: mean_of(rs.iter().map(|r| r.iou)),
            mean_abs_err_mm: mean_of(rs.iter().map(|r| r.abs_error_mm)),
            mean_rel_err_pct: mean_of(rs.iter().map(|r| r.rel_error_pct)),
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let method = |m: Provenance| match m {
        Provenance::Baseline => "baseline",
        Provenance::Tta => "tta",
        Provenance::Mcd => "mcd",
    };
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.modality,
            method(r.method),
            r.n,
            fmt(r.mean_iou),
            fmt(r.mean_abs_err_mm),
            fmt(r.mean_rel_err_pct)
        ));
    }
    out
}
