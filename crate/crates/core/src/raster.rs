//! Canonical raster types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the values of a [`Raster`] mean, and therefore which range they obey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// Image intensity in `[0, 1]`.
    Intensity,
    /// Foreground probability in `[0, 1]`.
    Probability,
    /// Any nonnegative uncertainty measure.
    Uncertainty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("expected {expected} values for a {width}x{height} raster, got {got}")]
    LengthMismatch {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("value {value} at index {index} is outside the valid range for {kind:?} rasters")]
    OutOfRange {
        index: usize,
        value: f64,
        kind: ValueKind,
    },
    #[error("expected a {expected:?} raster, got {got:?}")]
    WrongKind { expected: ValueKind, got: ValueKind },
    #[error("dimension mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("pixel size must be positive and finite, got {0}")]
    InvalidPixelSize(f64),
}

/// A row-major 2-D grid of `f64` values with a declared [`ValueKind`].
///
/// The range invariant for the kind is checked on construction, so every
/// `Raster` in circulation is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    values: Vec<f64>,
    kind: ValueKind,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f64>,
        kind: ValueKind,
    ) -> Result<Self, RasterError> {
        check_dims(width, height, values.len())?;
        for (index, &value) in values.iter().enumerate() {
            let ok = match kind {
                ValueKind::Intensity | ValueKind::Probability => (0.0..=1.0).contains(&value),
                ValueKind::Uncertainty => value >= 0.0 && value.is_finite(),
            };
            if !ok {
                return Err(RasterError::OutOfRange { index, value, kind });
            }
        }
        Ok(Self {
            width,
            height,
            values,
            kind,
        })
    }

    /// Builds a raster after clamping every value into the kind's range.
    /// NaN maps to 0.
    pub fn new_clamped(
        width: usize,
        height: usize,
        mut values: Vec<f64>,
        kind: ValueKind,
    ) -> Result<Self, RasterError> {
        for v in values.iter_mut() {
            *v = clamp_for(kind, *v);
        }
        Self::new(width, height, values, kind)
    }

    pub fn filled(width: usize, height: usize, value: f64, kind: ValueKind) -> Result<Self, RasterError> {
        Self::new(width, height, vec![value; width * height], kind)
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel, clamping into range.
    pub fn from_fn(
        width: usize,
        height: usize,
        kind: ValueKind,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, RasterError> {
        check_dims(width, height, width * height)?;
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(clamp_for(kind, f(x, y)));
            }
        }
        Self::new(width, height, values, kind)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn expect_kind(&self, expected: ValueKind) -> Result<(), RasterError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(RasterError::WrongKind {
                expected,
                got: self.kind,
            })
        }
    }

    /// Reinterprets the raster as another kind, re-checking the range invariant.
    pub fn with_kind(self, kind: ValueKind) -> Result<Self, RasterError> {
        Self::new(self.width, self.height, self.values, kind)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn clamp_for(kind: ValueKind, v: f64) -> f64 {
    if v.is_nan() {
        return 0.0;
    }
    match kind {
        ValueKind::Intensity | ValueKind::Probability => v.clamp(0.0, 1.0),
        ValueKind::Uncertainty => v.max(0.0),
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions { width, height });
    }
    if len != width * height {
        return Err(RasterError::LengthMismatch {
            width,
            height,
            expected: width * height,
            got: len,
        });
    }
    Ok(())
}

/// Row-major foreground flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, RasterError> {
        check_dims(width, height, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, RasterError> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, RasterError> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn check_same_dims(&self, other: &BinaryMask) -> Result<(), RasterError> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(RasterError::DimensionMismatch {
                a_width: self.width,
                a_height: self.height,
                b_width: other.width,
                b_height: other.height,
            })
        }
    }

    /// The mask as a 0/1 probability raster.
    pub fn to_raster(&self) -> Raster {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Raster::new(self.width, self.height, values, ValueKind::Probability)
            .expect("mask dimensions already validated")
    }
}

/// Foreground iff `value > threshold`; an exact tie is background.
pub fn binarize(probmap: &Raster, threshold: f64) -> Result<BinaryMask, RasterError> {
    probmap.expect_kind(ValueKind::Probability)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RasterError::InvalidThreshold(threshold));
    }
    let bits = probmap.values().iter().map(|&v| v > threshold).collect();
    BinaryMask::new(probmap.width(), probmap.height(), bits)
}

/// Isotropic pixel spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub pixel_size_mm: f64,
}

impl Calibration {
    pub fn new(pixel_size_mm: f64) -> Result<Self, RasterError> {
        if pixel_size_mm > 0.0 && pixel_size_mm.is_finite() {
            Ok(Self { pixel_size_mm })
        } else {
            Err(RasterError::InvalidPixelSize(pixel_size_mm))
        }
    }

    pub fn to_mm(&self, px: f64) -> f64 {
        px * self.pixel_size_mm
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self { pixel_size_mm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Head,
    Femur,
    Unknown,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Head => "head",
            Modality::Femur => "femur",
            Modality::Unknown => "unknown",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head" => Ok(Modality::Head),
            "femur" => Ok(Modality::Femur),
            "unknown" => Ok(Modality::Unknown),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// Per-case metadata carried alongside an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub modality: Modality,
    pub calibration: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_measurement_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<std::path::PathBuf>,
}
