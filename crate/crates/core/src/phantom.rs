//! Synthetic phantoms with analytically known geometry.
//!
//! Head-like cases are filled ellipses, femur-like cases are capsules
//! (a segment swept by a disc). Pixel `(x, y)` has its center at `(x, y)`,
//! the same convention the contour tracer uses.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{self, FormatError};
use crate::geometry::ellipse_perimeter;
use crate::raster::{BinaryMask, Calibration, CaseMeta, Modality, Raster, ValueKind};
use crate::seed;

/// Minimum clearance between the shape's bounding extent and the canvas edge.
pub const CANVAS_MARGIN_PX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("shape extent [{min_x:.2}, {max_x:.2}] x [{min_y:.2}, {max_y:.2}] does not fit a {width}x{height} canvas with a {CANVAS_MARGIN_PX} px margin")]
    ExceedsCanvas {
        min_x: f64,
        max_x: f64,
        min_y: f64,
        max_y: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("dataset count must be at least 1")]
    EmptyDataset,
    #[error("cannot write dataset to {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomShape {
    Ellipse {
        semi_major: f64,
        semi_minor: f64,
        orientation_deg: f64,
    },
    /// `length` is tip to tip, caps included.
    Capsule {
        length: f64,
        radius: f64,
        orientation_deg: f64,
    },
}

impl PhantomShape {
    pub fn modality(&self) -> Modality {
        match self {
            PhantomShape::Ellipse { .. } => Modality::Head,
            PhantomShape::Capsule { .. } => Modality::Femur,
        }
    }

    /// Axis-aligned half extents about the center.
    fn half_extents(&self) -> (f64, f64) {
        match *self {
            PhantomShape::Ellipse {
                semi_major: a,
                semi_minor: b,
                orientation_deg,
            } => {
                let (s, c) = orientation_deg.to_radians().sin_cos();
                (
                    (a * a * c * c + b * b * s * s).sqrt(),
                    (a * a * s * s + b * b * c * c).sqrt(),
                )
            }
            PhantomShape::Capsule {
                length,
                radius,
                orientation_deg,
            } => {
                let (s, c) = orientation_deg.to_radians().sin_cos();
                let half = length / 2.0 - radius;
                (half * c.abs() + radius, half * s.abs() + radius)
            }
        }
    }

    /// Whether point `(x, y)`, relative to the shape center, lies inside.
    pub fn contains_offset(&self, dx: f64, dy: f64) -> bool {
        match *self {
            PhantomShape::Ellipse {
                semi_major: a,
                semi_minor: b,
                orientation_deg,
            } => {
                let (s, c) = orientation_deg.to_radians().sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            PhantomShape::Capsule {
                length,
                radius,
                orientation_deg,
            } => {
                let (s, c) = orientation_deg.to_radians().sin_cos();
                let half = length / 2.0 - radius;
                let u = (dx * c + dy * s).clamp(-half, half);
                let (px, py) = (u * c, u * s);
                (dx - px).powi(2) + (dy - py).powi(2) <= radius * radius
            }
        }
    }

    /// Ground-truth measurement in pixels: ellipse perimeter approximation
    /// for heads, tip-to-tip length for femurs.
    pub fn measurement_px(&self) -> f64 {
        match *self {
            PhantomShape::Ellipse {
                semi_major,
                semi_minor,
                ..
            } => ellipse_perimeter(semi_major, semi_minor),
            PhantomShape::Capsule { length, .. } => length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: PhantomShape,
    pub width: usize,
    pub height: usize,
    pub center: (f64, f64),
    pub inside_level: f64,
    pub outside_level: f64,
    pub noise_sigma: f64,
    pub blur_passes: u32,
    pub pixel_size_mm: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty");
        }
        for (name, level) in [("inside_level", self.inside_level), ("outside_level", self.outside_level)] {
            if !(0.0..=1.0).contains(&level) {
                return Err(PhantomError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.inside_level == self.outside_level {
            return bad("inside_level and outside_level must differ");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite nonnegative number");
        }
        if !(self.pixel_size_mm > 0.0 && self.pixel_size_mm.is_finite()) {
            return bad("pixel_size_mm must be positive");
        }
        match self.shape {
            PhantomShape::Ellipse {
                semi_major,
                semi_minor,
                ..
            } => {
                if !(semi_minor > 0.0 && semi_major >= semi_minor && semi_major.is_finite()) {
                    return bad("ellipse requires semi_major >= semi_minor > 0");
                }
            }
            PhantomShape::Capsule { length, radius, .. } => {
                if !(radius > 0.0 && length >= 2.0 * radius && length.is_finite()) {
                    return bad("capsule requires length >= 2 * radius > 0");
                }
            }
        }
        let (hx, hy) = self.shape.half_extents();
        let (cx, cy) = self.center;
        let (min_x, max_x, min_y, max_y) = (cx - hx, cx + hx, cy - hy, cy + hy);
        if min_x < CANVAS_MARGIN_PX
            || min_y < CANVAS_MARGIN_PX
            || max_x > (self.width - 1) as f64 - CANVAS_MARGIN_PX
            || max_y > (self.height - 1) as f64 - CANVAS_MARGIN_PX
        {
            return Err(PhantomError::ExceedsCanvas {
                min_x,
                max_x,
                min_y,
                max_y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn gt_measurement_mm(&self) -> f64 {
        self.shape.measurement_px() * self.pixel_size_mm
    }

    /// The analytic point-in-shape test in canvas coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.shape.contains_offset(x - self.center.0, y - self.center.1)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Raster,
    pub mask: BinaryMask,
    pub meta: CaseMeta,
}

/// Rasterizes `spec`, blurs, and adds seeded Gaussian noise.
///
/// Only the noise consumes `seed`; the mask is a function of `spec` alone.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mask = BinaryMask::from_fn(w, h, |x, y| spec.contains(x as f64, y as f64))
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;

    let delta = spec.inside_level - spec.outside_level;
    let mut values: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| spec.outside_level + delta * if b { 1.0 } else { 0.0 })
        .collect();
    for _ in 0..spec.blur_passes {
        values = box_blur3(&values, w, h);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
        let mut rng = seed::rng(seed);
        for v in values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let image = Raster::new(w, h, values, ValueKind::Intensity)
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    let meta = CaseMeta {
        case_id: format!("{}-{seed:016x}", spec.shape.modality()),
        modality: spec.shape.modality(),
        calibration: Calibration {
            pixel_size_mm: spec.pixel_size_mm,
        },
        gt_measurement_mm: Some(spec.gt_measurement_mm()),
        gt_mask_path: None,
    };
    Ok(Phantom { image, mask, meta })
}

/// 3x3 mean filter with edge clamping.
pub fn box_blur3(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        values[y * width + x]
    };
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut sum = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    sum += at(x + dx, y + dy);
                }
            }
            out.push(sum / 9.0);
        }
    }
    out
}

/// Parameter ranges for [`generate_dataset`]. Each `(lo, hi)` is sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    /// Ellipse semi-major axis, px.
    pub semi_major: (f64, f64),
    /// Ellipse axis ratio a/b.
    pub axis_ratio: (f64, f64),
    /// Capsule tip-to-tip length, px.
    pub capsule_length: (f64, f64),
    pub capsule_radius: (f64, f64),
    /// Inside minus outside intensity. Levels are placed symmetrically about
    /// `edge_level`, so a blurred edge crosses `edge_level` on the true boundary.
    pub contrast: (f64, f64),
    /// Mid-level of each phantom; matches the reference predictor's threshold.
    pub edge_level: f64,
    pub noise_sigma: f64,
    pub blur_passes: u32,
    pub pixel_size_mm: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 192,
            semi_major: (40.0, 70.0),
            axis_ratio: (1.0, 1.8),
            capsule_length: (60.0, 120.0),
            capsule_radius: (5.0, 9.0),
            contrast: (0.45, 0.75),
            edge_level: 0.5,
            noise_sigma: 0.05,
            blur_passes: 1,
            pixel_size_mm: 0.1,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws the jittered spec for dataset member `index`.
pub fn dataset_spec(config: &DatasetConfig, modality: Modality, case_seed: u64) -> Result<PhantomSpec, PhantomError> {
    let mut rng = seed::rng(seed::derive(case_seed, 1));
    let orientation_deg = uniform(&mut rng, (0.0, 180.0));
    let shape = match modality {
        Modality::Head => {
            let a = uniform(&mut rng, config.semi_major);
            let ratio = uniform(&mut rng, config.axis_ratio).max(1.0);
            PhantomShape::Ellipse {
                semi_major: a,
                semi_minor: a / ratio,
                orientation_deg,
            }
        }
        Modality::Femur => {
            let radius = uniform(&mut rng, config.capsule_radius);
            let length = uniform(&mut rng, config.capsule_length).max(2.0 * radius);
            PhantomShape::Capsule {
                length,
                radius,
                orientation_deg,
            }
        }
        Modality::Unknown => {
            return Err(PhantomError::InvalidSpec(
                "phantoms are generated for head or femur only".into(),
            ))
        }
    };
    let (hx, hy) = shape.half_extents();
    let slack = CANVAS_MARGIN_PX + 2.0;
    let cx_range = (hx + slack, (config.width - 1) as f64 - hx - slack);
    let cy_range = (hy + slack, (config.height - 1) as f64 - hy - slack);
    if cx_range.0 > cx_range.1 || cy_range.0 > cy_range.1 {
        return Err(PhantomError::InvalidSpec(format!(
            "canvas {}x{} too small for the configured shape ranges",
            config.width, config.height
        )));
    }
    let center = (uniform(&mut rng, cx_range), uniform(&mut rng, cy_range));
    let contrast = uniform(&mut rng, config.contrast);
    Ok(PhantomSpec {
        shape,
        width: config.width,
        height: config.height,
        center,
        inside_level: config.edge_level + contrast / 2.0,
        outside_level: config.edge_level - contrast / 2.0,
        noise_sigma: config.noise_sigma,
        blur_passes: config.blur_passes,
        pixel_size_mm: config.pixel_size_mm,
    })
}

/// One row of `dataset.json`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub case_id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub pixel_size_mm: f64,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_measurement_mm: Option<f64>,
}

impl DatasetEntry {
    pub fn meta(&self, dataset_dir: &Path) -> CaseMeta {
        CaseMeta {
            case_id: self.case_id.clone(),
            modality: self.modality,
            calibration: Calibration {
                pixel_size_mm: self.pixel_size_mm,
            },
            gt_measurement_mm: self.gt_measurement_mm,
            gt_mask_path: self.mask.as_ref().map(|m| dataset_dir.join(m)),
        }
    }
}

pub const DATASET_INDEX: &str = "dataset.json";

/// Writes `count` jittered phantoms plus a `dataset.json` index into `out_dir`.
pub fn generate_dataset(
    modality: Modality,
    count: usize,
    seed: u64,
    config: &DatasetConfig,
    out_dir: &Path,
) -> Result<Vec<CaseMeta>, PhantomError> {
    if count == 0 {
        return Err(PhantomError::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(|source| PhantomError::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(count);
    let mut metas = Vec::with_capacity(count);
    for index in 0..count {
        let case_seed = seed::derive(seed, index as u64);
        let spec = dataset_spec(config, modality, case_seed)?;
        let phantom = generate_phantom(&spec, case_seed)?;
        let case_id = format!("{modality}_{index:04}");
        let image = PathBuf::from(format!("{case_id}.pgm"));
        let mask = PathBuf::from(format!("{case_id}_mask.pgm"));
        formats::save_image(&phantom.image, &out_dir.join(&image))?;
        formats::write_sidecar(&out_dir.join(&image), phantom.meta.calibration)?;
        formats::save_mask(&phantom.mask, &out_dir.join(&mask))?;
        let entry = DatasetEntry {
            case_id: case_id.clone(),
            image,
            mask: Some(mask),
            pixel_size_mm: spec.pixel_size_mm,
            modality,
            gt_measurement_mm: phantom.meta.gt_measurement_mm,
        };
        metas.push(entry.meta(out_dir));
        entries.push(entry);
    }
    let mut index = serde_json::to_vec_pretty(&entries).expect("dataset index serializes");
    index.push(b'\n');
    formats::write_atomic(&out_dir.join(DATASET_INDEX), &index)?;
    Ok(metas)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>, FormatError> {
    let path = dir.join(DATASET_INDEX);
    let bytes = fs::read(&path).map_err(|source| FormatError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| FormatError::MalformedHeader {
        offset: e.column(),
        reason: format!("{}: {e}", path.display()),
    })
}
