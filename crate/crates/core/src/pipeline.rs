//! Batch runner: dataset in, per-case result tree out, plus the analysis
//! pass over a finished result tree.
//!
//! Layout of a result tree:
//!
//! ```text
//! <out>/config.json          resolved run configuration
//! <out>/summary.json         run parameters, per-case status, failures
//! <out>/cases/<id>/case.json CaseRecord
//! <out>/cases/<id>/*.uqp     sample stack, mean map, uncertainty maps
//! <out>/cases/<id>/*.pgm     image, masks, 8-bit heatmaps
//! ```
//!
//! Every file is a pure function of the dataset, the configuration, the
//! method, the sample count and the seed; worker count and dataset order do
//! not affect any byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, AnalysisError, CaseFiles, CaseRecord, DecisionState, HistogramCase, ReportRow, ScoreSet, UncErrorHistogram,
};
use crate::formats::{self, FormatError};
use crate::geometry;
use crate::phantom::{self, DatasetEntry};
use crate::predictor::{self, ExternalPredictor, PredictMode, Predictor, PredictorError, SigmoidParams, SigmoidPredictor};
use crate::raster::{binarize, BinaryMask, Calibration, Raster, ValueKind};
use crate::seed;
use crate::tta::{self, AugmentationPriors, Provenance, SampleStack, TransformSpec, TtaError};
use crate::uncertainty::{self, ScoreKind, UncertaintyMaps};

pub const DEFAULT_SAMPLES: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const CASES_DIR: &str = "cases";
pub const CASE_RECORD: &str = "case.json";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(#[source] FormatError),
    #[error("dataset lists case_id {0:?} more than once")]
    DuplicateCase(String),
    #[error("results: {0}")]
    Results(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    /// The built-in reference predictor.
    Sigmoid(SigmoidParams),
    /// A program honoring the external predictor contract.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
}

fn default_timeout_s() -> f64 {
    predictor::DEFAULT_EXTERNAL_TIMEOUT.as_secs_f64()
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig::Sigmoid(SigmoidParams::default())
    }
}

impl PredictorConfig {
    pub fn build(&self, calibration: Calibration) -> Result<Box<dyn Predictor>, PredictorError> {
        match self {
            PredictorConfig::Sigmoid(params) => Ok(Box::new(SigmoidPredictor::new(*params)?)),
            PredictorConfig::External { command, timeout_s } => {
                if !(timeout_s.is_finite() && *timeout_s > 0.0) {
                    return Err(PredictorError::InvalidParams(format!("timeout_s must be positive, got {timeout_s}")));
                }
                Ok(Box::new(
                    ExternalPredictor::new(command.clone())?
                        .with_timeout(Duration::from_secs_f64(*timeout_s))
                        .with_calibration(calibration),
                ))
            }
        }
    }
}

/// Contents of the `--config` JSON file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub predictor: PredictorConfig,
    pub priors: AugmentationPriors,
    pub threshold: f64,
    /// Fixed OOD cutoff; when absent the run derives `mean + 2 sd` of its own scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_threshold: Option<f64>,
    /// Worker threads; defaults to the available CPUs. Never affects output.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            priors: AugmentationPriors::default(),
            threshold: DEFAULT_THRESHOLD,
            ood_threshold: None,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PipelineError> {
        let config: RunConfig = serde_json::from_slice(bytes).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&fs::read(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if let Some(t) = self.ood_threshold {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("ood_threshold must be positive, got {t}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.priors.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.predictor
            .build(Calibration::default())
            .map(drop)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub method: Provenance,
    pub samples: usize,
    pub seed: u64,
}

impl RunOptions {
    /// Baseline is a single deterministic pass whatever `samples` says.
    pub fn effective_samples(&self) -> usize {
        match self.method {
            Provenance::Baseline => 1,
            _ => self.samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Data,
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    /// Measured successfully.
    Ok,
    /// Processed, but no measurement (see the record's `flag_reason`).
    Flagged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub status: CaseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Config,
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Provenance,
    pub samples: usize,
    pub seed: u64,
    pub threshold: f64,
    #[serde(default)]
    pub ood_threshold: Option<f64>,
    #[serde(default)]
    pub ood_threshold_source: Option<ThresholdSource>,
    pub cases: Vec<CaseSummary>,
    pub failures: Vec<CaseFailure>,
}

impl RunSummary {
    pub fn has_failures(&self, kind: FailureKind) -> bool {
        self.failures.iter().any(|f| f.kind == kind)
    }
}

/// Everything computed for one case before the run-wide OOD threshold is known.
pub struct CaseOutput {
    pub record: CaseRecord,
    pub stack: SampleStack,
    pub maps: UncertaintyMaps,
    pub mask: BinaryMask,
}

struct CaseInputs {
    image: Raster,
    calibration: Calibration,
    gt_mask: Option<BinaryMask>,
}

fn is_safe_case_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn load_inputs(entry: &DatasetEntry, dataset_dir: &Path) -> Result<CaseInputs, String> {
    if !is_safe_case_id(&entry.case_id) {
        return Err(format!("case_id {:?} is not a safe directory name", entry.case_id));
    }
    let image_path = dataset_dir.join(&entry.image);
    let bytes = fs::read(&image_path).map_err(|e| format!("{}: {e}", image_path.display()))?;
    let image = formats::decode_image(&bytes).map_err(|e| format!("{}: {e}", image_path.display()))?;
    let calibration = Calibration::new(entry.pixel_size_mm).map_err(|e| e.to_string())?;
    let gt_mask = match &entry.mask {
        Some(rel) => {
            let path = dataset_dir.join(rel);
            let mask = formats::load_mask(&path).map_err(|e| e.to_string())?;
            if mask.width() != image.width() || mask.height() != image.height() {
                return Err(format!(
                    "{}: mask is {}x{}, image is {}x{}",
                    path.display(),
                    mask.width(),
                    mask.height(),
                    image.width(),
                    image.height()
                ));
            }
            Some(mask)
        }
        None => None,
    };
    Ok(CaseInputs {
        image,
        calibration,
        gt_mask,
    })
}

/// Draws the sample stack for one image.
pub fn sample_stack(
    predictor: &dyn Predictor,
    image: &Raster,
    options: &RunOptions,
    priors: &AugmentationPriors,
    case_seed: u64,
) -> Result<SampleStack, PredictorError> {
    match options.method {
        Provenance::Baseline => {
            let map = predictor.predict(image, PredictMode::Deterministic)?;
            if !map.same_dims(image) {
                return Err(PredictorError::DimensionMismatch {
                    width: image.width(),
                    height: image.height(),
                    got_width: map.width(),
                    got_height: map.height(),
                });
            }
            Ok(SampleStack::new(vec![map], Provenance::Baseline, vec![TransformSpec::identity()], case_seed)?)
        }
        Provenance::Tta => tta::tta_sample_stack(predictor, image, options.samples, priors, case_seed).map_err(|e| match e {
            TtaError::Predictor(p) => p,
            other => PredictorError::InvalidParams(other.to_string()),
        }),
        Provenance::Mcd => predictor::mcd_sample_stack(predictor, image, options.samples, case_seed),
    }
}

fn case_files(samples: usize, with_gt: bool) -> CaseFiles {
    CaseFiles {
        image: "image.pgm".into(),
        gt_mask: with_gt.then(|| "gt_mask.pgm".into()),
        mask: "mask.pgm".into(),
        mean_prob: "mean_prob.uqp".into(),
        total: "total.uqp".into(),
        data: "data.uqp".into(),
        model: "model.uqp".into(),
        ekl: "ekl.uqp".into(),
        variance: "variance.uqp".into(),
        max_prob: "max_prob.uqp".into(),
        samples: (0..samples).map(|i| format!("sample_{i:02}.uqp").into()).collect(),
    }
}

/// Runs the whole per-case chain in memory. The record's OOD fields are
/// placeholders until [`run`] knows the run-wide threshold.
pub fn process_case(
    entry: &DatasetEntry,
    image: &Raster,
    calibration: Calibration,
    gt_mask: Option<&BinaryMask>,
    config: &RunConfig,
    options: &RunOptions,
) -> Result<CaseOutput, PredictorError> {
    let case_seed = seed::for_case(options.seed, &entry.case_id);
    let predictor = config.predictor.build(calibration)?;
    let stack = sample_stack(predictor.as_ref(), image, options, &config.priors, case_seed)?;
    let maps = uncertainty::decompose(&stack);
    let mask = binarize(&maps.mean_prob, config.threshold)?;

    let (measurement, flag_reason) = match geometry::measure(&mask, entry.modality, calibration) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let iou = gt_mask.map(|gt| analysis::iou(&mask, gt)).transpose().map_err(|e| PredictorError::InvalidParams(e.to_string()))?;
    let reference = entry.gt_measurement_mm.filter(|&mu| mu > 0.0);
    let (abs_error_mm, rel_error_pct) = match (measurement, reference) {
        (Some(m), Some(mu)) => (
            Some(analysis::absolute_error(m.value_mm, mu)),
            analysis::relative_error(m.value_mm, mu).ok(),
        ),
        _ => (None, None),
    };
    let scores = ScoreSet {
        total: uncertainty::image_uncertainty_score(&maps, ScoreKind::Total),
        data: uncertainty::image_uncertainty_score(&maps, ScoreKind::Data),
        model: uncertainty::image_uncertainty_score(&maps, ScoreKind::Model),
    };
    let record = CaseRecord {
        case_id: entry.case_id.clone(),
        modality: entry.modality,
        pixel_size_mm: calibration.pixel_size_mm,
        gt_measurement_mm: entry.gt_measurement_mm,
        method: options.method,
        samples: stack.len(),
        seed: case_seed,
        threshold: config.threshold,
        width: image.width(),
        height: image.height(),
        files: case_files(stack.len(), gt_mask.is_some()),
        measurement,
        flag_reason,
        iou,
        abs_error_mm,
        rel_error_pct,
        uncertainty_score: scores.total,
        scores,
        ood_threshold: 0.0,
        ood_flag: false,
        decision: DecisionState::Pending,
    };
    Ok(CaseOutput {
        record,
        stack,
        maps,
        mask,
    })
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("result types serialize");
    bytes.push(b'\n');
    bytes
}

fn write_case(
    case_dir: &Path,
    output: &CaseOutput,
    image: &Raster,
    gt_mask: Option<&BinaryMask>,
) -> Result<(), FormatError> {
    let files = &output.record.files;
    let maps = &output.maps;
    let at = |p: &PathBuf| case_dir.join(p);
    formats::save_image(image, &at(&files.image))?;
    if let (Some(gt), Some(path)) = (gt_mask, &files.gt_mask) {
        formats::save_mask(gt, &at(path))?;
    }
    formats::save_mask(&output.mask, &at(&files.mask))?;
    formats::save_uqp(&maps.mean_prob, &at(&files.mean_prob))?;
    for (raster, path) in [
        (&maps.total_entropy, &files.total),
        (&maps.expected_entropy, &files.data),
        (&maps.mutual_information, &files.model),
        (&maps.ekl, &files.ekl),
        (&maps.variance, &files.variance),
        (&maps.max_prob, &files.max_prob),
    ] {
        let path = at(path);
        formats::save_uqp(raster, &path)?;
        formats::write_atomic(&path.with_extension("pgm"), &formats::encode_heatmap(raster))?;
    }
    for (map, path) in output.stack.maps().iter().zip(&files.samples) {
        formats::save_uqp(map, &at(path))?;
    }
    formats::write_atomic(&case_dir.join(CASE_RECORD), &to_json_bytes(&output.record))
}

/// Refuses to write into a non-empty directory that is not a previous result
/// tree; a previous tree's `cases/` is replaced wholesale.
fn prepare_out_dir(out_dir: &Path) -> Result<(), PipelineError> {
    if out_dir.exists() {
        let mut entries = fs::read_dir(out_dir).map_err(io_err(out_dir))?;
        let non_empty = entries.next().is_some();
        if non_empty && !out_dir.join(SUMMARY).is_file() {
            return Err(PipelineError::Results(format!(
                "{} is not empty and holds no previous results",
                out_dir.display()
            )));
        }
        let cases = out_dir.join(CASES_DIR);
        if cases.exists() {
            fs::remove_dir_all(&cases).map_err(io_err(&cases))?;
        }
    }
    let cases = out_dir.join(CASES_DIR);
    fs::create_dir_all(&cases).map_err(io_err(&cases))
}

enum Outcome {
    Done(Box<CaseOutput>, CaseInputs),
    Failed(CaseFailure),
}

/// Processes every case of a dataset directory and writes the result tree.
pub fn run(dataset_dir: &Path, out_dir: &Path, config: &RunConfig, options: &RunOptions) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    if options.samples == 0 {
        return Err(PipelineError::Config("samples must be at least 1".into()));
    }
    let options = RunOptions {
        samples: options.effective_samples(),
        ..*options
    };
    let entries = phantom::load_dataset(dataset_dir).map_err(PipelineError::Dataset)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.case_id.as_str())) {
        return Err(PipelineError::DuplicateCase(dup.case_id.clone()));
    }
    prepare_out_dir(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let inputs = match load_inputs(entry, dataset_dir) {
                    Ok(i) => i,
                    Err(message) => {
                        return Outcome::Failed(CaseFailure {
                            case_id: entry.case_id.clone(),
                            kind: FailureKind::Data,
                            message,
                        })
                    }
                };
                match process_case(entry, &inputs.image, inputs.calibration, inputs.gt_mask.as_ref(), config, &options) {
                    Ok(out) => Outcome::Done(Box::new(out), inputs),
                    Err(e) => Outcome::Failed(CaseFailure {
                        case_id: entry.case_id.clone(),
                        kind: FailureKind::Predictor,
                        message: e.to_string(),
                    }),
                }
            })
            .collect()
    });

    let scores: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::Done(out, _) => Some(out.record.uncertainty_score),
            Outcome::Failed(_) => None,
        })
        .collect();
    let (ood_threshold, source) = match (config.ood_threshold, scores.is_empty()) {
        (Some(t), _) => (Some(t), Some(ThresholdSource::Config)),
        (None, false) => (
            Some(analysis::ood_threshold(&scores)?.max(f64::MIN_POSITIVE)),
            Some(ThresholdSource::Run),
        ),
        (None, true) => (None, None),
    };

    let written: Vec<Result<Result<CaseSummary, CaseFailure>, PipelineError>> = pool.install(|| {
        outcomes
            .into_par_iter()
            .map(|outcome| match outcome {
                Outcome::Done(mut out, inputs) => {
                    let t = ood_threshold.expect("threshold exists when any case succeeded");
                    out.record.ood_threshold = t;
                    out.record.ood_flag = analysis::ood_flag(out.record.uncertainty_score, t)?;
                    let case_dir = out_dir.join(CASES_DIR).join(&out.record.case_id);
                    fs::create_dir_all(&case_dir).map_err(io_err(&case_dir))?;
                    write_case(&case_dir, &out, &inputs.image, inputs.gt_mask.as_ref())?;
                    let status = if out.record.measurement.is_some() { CaseStatus::Ok } else { CaseStatus::Flagged };
                    Ok(Ok(CaseSummary {
                        case_id: out.record.case_id.clone(),
                        status,
                    }))
                }
                Outcome::Failed(failure) => Ok(Err(failure)),
            })
            .collect()
    });
    let mut cases = Vec::with_capacity(written.len());
    let mut failures = Vec::new();
    for result in written {
        match result? {
            Ok(summary) => cases.push(summary),
            Err(failure) => {
                cases.push(CaseSummary {
                    case_id: failure.case_id.clone(),
                    status: CaseStatus::Failed,
                });
                failures.push(failure);
            }
        }
    }

    let summary = RunSummary {
        method: options.method,
        samples: options.samples,
        seed: options.seed,
        threshold: config.threshold,
        ood_threshold,
        ood_threshold_source: source,
        cases,
        failures,
    };
    formats::write_atomic(&out_dir.join(CONFIG), &to_json_bytes(config))?;
    formats::write_atomic(&out_dir.join(SUMMARY), &to_json_bytes(&summary))?;
    Ok(summary)
}

/// A case record together with its directory.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub dir: PathBuf,
    pub record: CaseRecord,
}

impl LoadedCase {
    pub fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }
}

/// Reads every `cases/<id>/case.json` of a result tree, sorted by case id.
pub fn load_results(results_dir: &Path) -> Result<Vec<LoadedCase>, PipelineError> {
    if !results_dir.is_dir() {
        return Err(PipelineError::Results(format!("{} is not a directory", results_dir.display())));
    }
    let cases_dir = results_dir.join(CASES_DIR);
    if !cases_dir.exists() {
        return Ok(Vec::new());
    }
    let mut loaded = Vec::new();
    for dir_entry in fs::read_dir(&cases_dir).map_err(io_err(&cases_dir))? {
        let dir = dir_entry.map_err(io_err(&cases_dir))?.path();
        let record_path = dir.join(CASE_RECORD);
        if !record_path.is_file() {
            continue;
        }
        let bytes = fs::read(&record_path).map_err(io_err(&record_path))?;
        let record: CaseRecord = serde_json::from_slice(&bytes)
            .map_err(|e| PipelineError::Results(format!("{}: {e}", record_path.display())))?;
        loaded.push(LoadedCase { dir, record });
    }
    loaded.sort_by(|a, b| a.record.case_id.cmp(&b.record.case_id));
    Ok(loaded)
}

pub const HEATMAP_LAYERS: [&str; 5] = ["total", "data", "model", "ekl", "variance"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// Uncertainty raster the histogram is built from.
    pub layer: String,
    pub cases: Vec<String>,
    #[serde(flatten)]
    pub histogram: UncErrorHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub rows: Vec<ReportRow>,
    pub histogram: Option<HistogramReport>,
}

/// Data-uncertainty versus error-rate histogram over cases with a ground-truth mask.
pub fn histogram_for(cases: &[LoadedCase], bin_width: f64) -> Result<Option<HistogramReport>, PipelineError> {
    let mut inputs = Vec::new();
    for case in cases {
        let files = &case.record.files;
        let Some(gt_rel) = &files.gt_mask else { continue };
        let data = formats::load_uqp(&case.path(&files.data), ValueKind::Uncertainty)?;
        let pred = formats::load_mask(&case.path(&files.mask))?;
        let gt = formats::load_mask(&case.path(gt_rel))?;
        inputs.push((case.record.case_id.clone(), data, pred, gt));
    }
    if inputs.is_empty() {
        return Ok(None);
    }
    let hc: Vec<HistogramCase> = inputs
        .iter()
        .map(|(_, u, p, g)| HistogramCase {
            uncertainty: u,
            pred: p,
            gt: g,
        })
        .collect();
    let histogram = analysis::unc_error_histogram(&hc, bin_width)?;
    Ok(Some(HistogramReport {
        layer: "data".into(),
        cases: inputs.into_iter().map(|(id, ..)| id).collect(),
        histogram,
    }))
}

/// Writes `report.csv`, `report.json`, `histogram.json` and
/// `heatmaps/<case>_<layer>.pgm` for a result tree.
pub fn analyze(results_dir: &Path, out_dir: &Path, bin_width: f64) -> Result<AnalysisOutput, PipelineError> {
    if !(bin_width > 0.0 && bin_width <= 0.5) {
        return Err(AnalysisError::InvalidBinWidth(bin_width).into());
    }
    let cases = load_results(results_dir)?;
    if cases.is_empty() {
        return Err(PipelineError::Results(format!("{} holds no case records", results_dir.display())));
    }
    let records: Vec<CaseRecord> = cases.iter().map(|c| c.record.clone()).collect();
    let rows = analysis::batch_report(&records)?;
    let histogram = histogram_for(&cases, bin_width)?;

    let heatmaps = out_dir.join("heatmaps");
    fs::create_dir_all(&heatmaps).map_err(io_err(&heatmaps))?;
    formats::write_atomic(&out_dir.join("report.csv"), analysis::report_csv(&rows).as_bytes())?;
    formats::write_atomic(&out_dir.join("report.json"), &to_json_bytes(&rows))?;
    formats::write_atomic(&out_dir.join("histogram.json"), &to_json_bytes(&histogram))?;
    for case in &cases {
        let files = &case.record.files;
        for (layer, rel) in HEATMAP_LAYERS.iter().zip([&files.total, &files.data, &files.model, &files.ekl, &files.variance]) {
            let raster = formats::load_uqp(&case.path(rel), ValueKind::Uncertainty)?;
            let path = heatmaps.join(format!("{}_{layer}.pgm", case.record.case_id));
            formats::write_atomic(&path, &formats::encode_heatmap(&raster))?;
        }
    }
    Ok(AnalysisOutput { rows, histogram })
}
