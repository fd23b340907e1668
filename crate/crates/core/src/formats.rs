//! On-disk formats: 8-bit PGM (P5/P2) for images and masks, the `UQP1`
//! float map for probability and uncertainty rasters, and the JSON
//! calibration sidecar.
//!
//! `UQP1` layout: the ASCII header `UQP1\n<width> <height>\n` followed by
//! `width * height` little-endian binary32 values, row-major, top-left origin.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Calibration, Raster, RasterError, ValueKind};

pub const UQP_MAGIC: &[u8] = b"UQP1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("unsupported maxval {maxval} at byte {offset} (only 255 is supported)")]
    UnsupportedMaxval { offset: usize, maxval: u64 },
    #[error("truncated payload at byte {offset}: expected {expected} samples, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad magic at byte 0: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("payload length mismatch at byte {offset}: expected {expected} bytes, found {found}")]
    PayloadMismatch {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },
    #[error("bad calibration sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parsed 8-bit PGM contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(u64, usize), FormatError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FormatError::MalformedHeader {
                offset: start,
                reason: format!("expected {what}"),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text.parse::<u64>().map_err(|_| FormatError::MalformedHeader {
            offset: start,
            reason: format!("{what} out of range"),
        })?;
        Ok((value, start))
    }
}

/// Parses a P5 (binary) or P2 (ASCII) PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm, FormatError> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'2') {
        return Err(FormatError::MalformedHeader {
            offset: 0,
            reason: "expected magic P5 or P2".into(),
        });
    }
    let binary = bytes[1] == b'5';
    let mut r = HeaderReader { bytes, pos: 2 };
    let (width, w_off) = r.number("width")?;
    let (height, h_off) = r.number("height")?;
    if width == 0 {
        return Err(FormatError::MalformedHeader {
            offset: w_off,
            reason: "width must be positive".into(),
        });
    }
    if height == 0 {
        return Err(FormatError::MalformedHeader {
            offset: h_off,
            reason: "height must be positive".into(),
        });
    }
    let (maxval, m_off) = r.number("maxval")?;
    if maxval != 255 {
        return Err(FormatError::UnsupportedMaxval {
            offset: m_off,
            maxval,
        });
    }
    let width = width as usize;
    let height = height as usize;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| FormatError::MalformedHeader {
            offset: w_off,
            reason: "dimensions overflow".into(),
        })?;

    let pixels = if binary {
        // exactly one whitespace byte separates maxval from the raster
        if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
            return Err(FormatError::MalformedHeader {
                offset: r.pos,
                reason: "expected whitespace after maxval".into(),
            });
        }
        let start = r.pos + 1;
        let payload = &bytes[start..];
        if payload.len() < expected {
            return Err(FormatError::TruncatedPayload {
                offset: start,
                expected,
                found: payload.len(),
            });
        }
        payload[..expected].to_vec()
    } else {
        let mut pixels = Vec::with_capacity(expected);
        for _ in 0..expected {
            r.skip_whitespace_and_comments();
            if r.pos >= bytes.len() {
                return Err(FormatError::TruncatedPayload {
                    offset: r.pos,
                    expected,
                    found: pixels.len(),
                });
            }
            let (v, off) = r.number("sample")?;
            if v > 255 {
                return Err(FormatError::MalformedHeader {
                    offset: off,
                    reason: format!("sample {v} exceeds maxval 255"),
                });
            }
            pixels.push(v as u8);
        }
        pixels
    };
    Ok(Pgm {
        width,
        height,
        pixels,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| FormatError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    pixel_size_mm: f64,
}

/// `<dir>/<stem>.meta.json` for an image path.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_sidecar(image_path: &Path, calibration: Calibration) -> Result<(), FormatError> {
    let path = sidecar_path(image_path);
    let body = serde_json::to_vec(&Sidecar {
        pixel_size_mm: calibration.pixel_size_mm,
    })
    .expect("sidecar serializes");
    write_atomic(&path, &body)
}

fn read_sidecar(image_path: &Path) -> Result<Calibration, FormatError> {
    let path = sidecar_path(image_path);
    if !path.exists() {
        return Ok(Calibration::default());
    }
    let bytes = read(&path)?;
    let sidecar: Sidecar = serde_json::from_slice(&bytes).map_err(|e| FormatError::Sidecar {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Calibration::new(sidecar.pixel_size_mm).map_err(|e| FormatError::Sidecar {
        path,
        reason: e.to_string(),
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Raster, FormatError> {
    let pgm = parse_pgm(bytes)?;
    let values = pgm.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Raster::new(pgm.width, pgm.height, values, ValueKind::Intensity)?)
}

/// Loads an intensity image plus its calibration (sidecar if present, else 1 mm/px).
pub fn load_image(path: &Path) -> Result<(Raster, Calibration), FormatError> {
    let raster = decode_image(&read(path)?)?;
    let calibration = read_sidecar(path)?;
    Ok((raster, calibration))
}

/// Quantizes an intensity (or probability) raster to 8 bits.
pub fn encode_image(raster: &Raster) -> Vec<u8> {
    let pixels: Vec<u8> = raster
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode_pgm(raster.width(), raster.height(), &pixels)
}

pub fn save_image(raster: &Raster, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_image(raster))
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let pixels: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.width(), mask.height(), &pixels)
}

/// Any nonzero byte is foreground.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, FormatError> {
    let pgm = parse_pgm(bytes)?;
    let bits = pgm.pixels.iter().map(|&b| b > 0).collect();
    Ok(BinaryMask::new(pgm.width, pgm.height, bits)?)
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_mask(mask))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, FormatError> {
    decode_mask(&read(path)?)
}

/// 8-bit view of an uncertainty raster: `value / max * 255`, all zeros when max is 0.
pub fn encode_heatmap(raster: &Raster) -> Vec<u8> {
    let max = raster.max();
    let pixels: Vec<u8> = raster
        .values()
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    encode_pgm(raster.width(), raster.height(), &pixels)
}

pub fn encode_uqp(raster: &Raster) -> Vec<u8> {
    let mut out = format!("UQP1\n{} {}\n", raster.width(), raster.height()).into_bytes();
    out.reserve(raster.len() * 4);
    for &v in raster.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a `UQP1` payload, validating it against `kind`.
pub fn decode_uqp(bytes: &[u8], kind: ValueKind) -> Result<Raster, FormatError> {
    if bytes.len() < 5 || &bytes[..4] != UQP_MAGIC || bytes[4] != b'\n' {
        return Err(FormatError::BadMagic { expected: "UQP1" });
    }
    let line_end = bytes[5..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| i + 5)
        .ok_or_else(|| FormatError::MalformedHeader {
            offset: 5,
            reason: "missing dimension line terminator".into(),
        })?;
    let line = std::str::from_utf8(&bytes[5..line_end]).map_err(|_| FormatError::MalformedHeader {
        offset: 5,
        reason: "dimension line is not ASCII".into(),
    })?;
    let mut parts = line.split(' ');
    let mut dim = |name: &str| -> Result<usize, FormatError> {
        parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| FormatError::MalformedHeader {
                offset: 5,
                reason: format!("bad {name}"),
            })
    };
    let width = dim("width")?;
    let height = dim("height")?;
    if parts.next().is_some() {
        return Err(FormatError::MalformedHeader {
            offset: 5,
            reason: "trailing tokens in dimension line".into(),
        });
    }
    let start = line_end + 1;
    let expected = width * height * 4;
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(FormatError::PayloadMismatch {
            offset: start,
            expected,
            found: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(width * height);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                offset: start + i * 4,
            });
        }
        values.push(f64::from(v));
    }
    Ok(Raster::new(width, height, values, kind)?)
}

pub fn save_uqp(raster: &Raster, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_uqp(raster))
}

pub fn load_uqp(path: &Path, kind: ValueKind) -> Result<Raster, FormatError> {
    decode_uqp(&read(path)?, kind)
}

pub fn save_probmap(raster: &Raster, path: &Path) -> Result<(), FormatError> {
    raster.expect_kind(ValueKind::Probability)?;
    save_uqp(raster, path)
}

pub fn load_probmap(path: &Path) -> Result<Raster, FormatError> {
    load_uqp(path, ValueKind::Probability)
}
