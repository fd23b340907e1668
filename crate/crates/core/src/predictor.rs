//! Per-pixel foreground probability predictors.
//!
//! A [`Predictor`] maps an intensity raster to a probability raster of the
//! same size. In [`PredictMode::Stochastic`] it draws one random
//! configuration per call (the analogue of one dropout pass); the draw is a
//! pure function of the seed.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{self, FormatError};
use crate::raster::{Calibration, Raster, RasterError, ValueKind};
use crate::seed;
use crate::tta::{Provenance, SampleStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Deterministic,
    Stochastic { seed: u64 },
}

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid predictor parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("failed to launch `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("predictor exited with {status}: {stderr}")]
    ProcessFailed { status: String, stderr: String },
    #[error("predictor timed out after {0:?}")]
    Timeout(Duration),
    #[error("predictor output missing: {0}")]
    MissingOutput(PathBuf),
    #[error("predictor output malformed: {0}")]
    MalformedOutput(#[source] FormatError),
    #[error("predictor returned {got_width}x{got_height}, expected {width}x{height}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        got_width: usize,
        got_height: usize,
    },
    #[error("predictor i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<PredictorError>,
    },
}

pub trait Predictor: Send + Sync {
    fn predict(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError> {
        (**self).predict(image, mode)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError> {
        (**self).predict(image, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmoidParams {
    /// Intensity at which the output is exactly 0.5.
    pub threshold: f64,
    /// Logistic scale; smaller is sharper.
    pub softness: f64,
    /// Std-dev of the additive threshold perturbation per stochastic pass.
    pub threshold_jitter: f64,
    /// Std-dev of the log-normal softness perturbation per stochastic pass.
    pub softness_jitter: f64,
}

impl Default for SigmoidParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            softness: 0.05,
            threshold_jitter: 0.05,
            softness_jitter: 0.01,
        }
    }
}

impl SigmoidParams {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::InvalidParams(m.into()));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.softness > 0.0 && self.softness.is_finite()) {
            return bad("softness must be positive");
        }
        if !(self.threshold_jitter >= 0.0 && self.softness_jitter >= 0.0) {
            return bad("jitters must be nonnegative");
        }
        if self.softness - 3.0 * self.softness_jitter <= 0.0 {
            return bad("softness - 3 * softness_jitter must stay positive");
        }
        Ok(())
    }
}

/// Pointwise logistic reference model: `p = 1 / (1 + exp(-(I - threshold) / softness))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidPredictor {
    params: SigmoidParams,
}

impl SigmoidPredictor {
    pub fn new(params: SigmoidParams) -> Result<Self, PredictorError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SigmoidParams {
        &self.params
    }

    /// The `(threshold, softness)` pair used for one forward pass.
    pub fn pass_params(&self, mode: PredictMode) -> (f64, f64) {
        let p = &self.params;
        match mode {
            PredictMode::Deterministic => (p.threshold, p.softness),
            PredictMode::Stochastic { seed } => {
                let mut rng = seed::rng(seed);
                let z_threshold: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
                let z_softness: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
                (
                    p.threshold + p.threshold_jitter * z_threshold,
                    p.softness * (p.softness_jitter * z_softness).exp(),
                )
            }
        }
    }
}

impl Predictor for SigmoidPredictor {
    fn predict(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError> {
        image.expect_kind(ValueKind::Intensity)?;
        let (threshold, softness) = self.pass_params(mode);
        let values = image
            .values()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-(v - threshold) / softness).exp()))
            .collect();
        Ok(Raster::new(
            image.width(),
            image.height(),
            values,
            ValueKind::Probability,
        )?)
    }
}

/// `T` stochastic passes with per-pass seeds `derive(seed, t)`.
pub fn mcd_sample_stack(
    predictor: &dyn Predictor,
    image: &Raster,
    samples: usize,
    seed: u64,
) -> Result<SampleStack, PredictorError> {
    if samples == 0 {
        return Err(PredictorError::InvalidParams("sample count must be at least 1".into()));
    }
    let mut maps = Vec::with_capacity(samples);
    for t in 0..samples {
        let mode = PredictMode::Stochastic {
            seed: seed::derive(seed, t as u64),
        };
        let map = predictor
            .predict(image, mode)
            .and_then(|m| check_output(image, m))
            .map_err(|e| PredictorError::Sample {
                index: t,
                source: Box::new(e),
            })?;
        maps.push(map);
    }
    Ok(SampleStack::new(maps, Provenance::Mcd, Vec::new(), seed)?)
}

fn check_output(image: &Raster, map: Raster) -> Result<Raster, PredictorError> {
    if !map.same_dims(image) {
        return Err(PredictorError::DimensionMismatch {
            width: image.width(),
            height: image.height(),
            got_width: map.width(),
            got_height: map.height(),
        });
    }
    map.expect_kind(ValueKind::Probability)?;
    Ok(map)
}

pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(60);

/// Runs an external program per prediction.
///
/// The program is invoked as `<command...> input.pgm output.uqp` inside a
/// fresh temporary directory (stochastic mode appends `--seed <n>`), and
/// must write `output.uqp` in `UQP1` format with the input's dimensions.
#[derive(Debug, Clone)]
pub struct ExternalPredictor {
    command: Vec<String>,
    timeout: Duration,
    calibration: Calibration,
}

impl ExternalPredictor {
    pub fn new(command: Vec<String>) -> Result<Self, PredictorError> {
        if command.is_empty() || command[0].trim().is_empty() {
            return Err(PredictorError::InvalidParams("external command is empty".into()));
        }
        Ok(Self {
            command,
            timeout: DEFAULT_EXTERNAL_TIMEOUT,
            calibration: Calibration::default(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Calibration written to `input.meta.json` for the external program.
    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = calibration;
        self
    }

    fn run(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("input.pgm");
        let output = dir.path().join("output.uqp");
        formats::save_image(image, &input).map_err(PredictorError::MalformedOutput)?;
        formats::write_sidecar(&input, self.calibration).map_err(PredictorError::MalformedOutput)?;

        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .arg("input.pgm")
            .arg("output.uqp")
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        if let PredictMode::Stochastic { seed } = mode {
            cmd.arg("--seed").arg(seed.to_string());
        }
        let mut child = cmd.spawn().map_err(|source| PredictorError::Spawn {
            command: self.command.join(" "),
            source,
        })?;
        let mut stderr = child.stderr.take().expect("stderr piped");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(PredictorError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let stderr = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(PredictorError::ProcessFailed {
                status: status.to_string(),
                stderr: stderr.trim().to_string(),
            });
        }
        if !output.exists() {
            return Err(PredictorError::MissingOutput(output));
        }
        let map = formats::load_probmap(&output).map_err(PredictorError::MalformedOutput)?;
        check_output(image, map)
    }
}

impl Predictor for ExternalPredictor {
    fn predict(&self, image: &Raster, mode: PredictMode) -> Result<Raster, PredictorError> {
        image.expect_kind(ValueKind::Intensity)?;
        self.run(image, mode)
    }
}
