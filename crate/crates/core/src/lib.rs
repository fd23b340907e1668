//! Segmentation uncertainty quantification for fetal ultrasound biometry.
//!
//! The crate covers the whole offline pipeline: raster I/O, synthetic
//! phantoms, predictors, test-time augmentation and Monte-Carlo sampling,
//! pixelwise uncertainty decomposition, contour/ellipse/rectangle geometry
//! for head circumference and femur length, and evaluation metrics.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod formats;
pub mod geometry;
pub mod phantom;
pub mod pipeline;
pub mod predictor;
pub mod raster;
pub mod seed;
pub mod tta;
pub mod uncertainty;

pub use analysis::{CaseRecord, DecisionState, ReportRow, UncErrorHistogram};
pub use geometry::{Measurement, MeasurementKind};
pub use predictor::{ExternalPredictor, PredictMode, Predictor, PredictorError, SigmoidParams, SigmoidPredictor};
pub use raster::{binarize, BinaryMask, Calibration, CaseMeta, Modality, Raster, RasterError, ValueKind};
pub use tta::{AugmentationPriors, Provenance, SampleStack, TransformSpec};
pub use uncertainty::{ScoreKind, UncertaintyMaps};
