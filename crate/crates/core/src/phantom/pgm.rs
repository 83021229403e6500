//! Binary PGM (P5) encoding for images and label maps.
//!
//! Images are stored at maxval 65535 (`round(x·65535)`), label maps at
//! maxval equal to the largest representable class id. Samples wider than
//! one byte are big-endian, as the format requires.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::labels::LabelMap;

pub const IMAGE_MAXVAL: u16 = 65535;
/// Largest accepted width or height.
pub const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("malformed PGM: {0}")]
    Parse(String),
    #[error("PGM dimensions {w}x{h} exceed the supported maximum")]
    DimensionOverflow { w: usize, h: usize },
    #[error("value {value} exceeds maxval {maxval}")]
    Range { value: u32, maxval: u16 },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Raw decoded raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub values: Vec<u16>,
}

pub fn encode(r: &Raster) -> Result<Vec<u8>, PgmError> {
    if r.maxval == 0 {
        return Err(PgmError::Parse("maxval must be at least 1".into()));
    }
    if let Some(&v) = r.values.iter().find(|&&v| v > r.maxval) {
        return Err(PgmError::Range { value: v as u32, maxval: r.maxval });
    }
    let mut out = format!("P5\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    if r.maxval < 256 {
        out.extend(r.values.iter().map(|&v| v as u8));
    } else {
        for v in &r.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, PgmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PgmError::Parse("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, PgmError> {
    let tok = header_token(bytes, pos)?;
    tok.parse::<usize>().map_err(|_| PgmError::Parse(format!("bad {what} {tok:?}")))
}

pub fn decode(bytes: &[u8]) -> Result<Raster, PgmError> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::Parse("missing P5 magic".into()));
    }
    pos += 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::Parse(format!("empty raster {width}x{height}")));
    }
    if width > MAX_DIM || height > MAX_DIM {
        return Err(PgmError::DimensionOverflow { w: width, h: height });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::Parse(format!("maxval {maxval} out of range")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::Parse("header not terminated by whitespace".into())),
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let body = &bytes[pos..];
    if body.len() != n * bps {
        return Err(PgmError::Parse(format!("expected {} data bytes, found {}", n * bps, body.len())));
    }
    let values: Vec<u16> = if bps == 1 {
        body.iter().map(|&b| b as u16).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    let maxval = maxval as u16;
    if let Some(&v) = values.iter().find(|&&v| v > maxval) {
        return Err(PgmError::Range { value: v as u32, maxval });
    }
    Ok(Raster { width, height, maxval, values })
}

pub fn image_raster(image: &Tensor) -> Result<Raster, PgmError> {
    let (c, height, width) = image.dims3("write_pgm").map_err(|e| PgmError::Parse(e.to_string()))?;
    if c != 1 {
        return Err(PgmError::Parse(format!("image must have one channel, got {c}")));
    }
    let values = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * IMAGE_MAXVAL as f64).round() as u16)
        .collect();
    Ok(Raster { width, height, maxval: IMAGE_MAXVAL, values })
}

pub fn raster_image(r: &Raster) -> Tensor {
    let scale = r.maxval as f64;
    Tensor::new(vec![1, r.height, r.width], r.values.iter().map(|&v| v as f64 / scale).collect())
        .expect("raster dimensions are positive")
}

pub fn labels_raster(labels: &LabelMap, maxval: u16) -> Raster {
    Raster {
        width: labels.width(),
        height: labels.height(),
        maxval: maxval.max(1),
        values: labels.labels().to_vec(),
    }
}

pub fn raster_labels(r: &Raster) -> LabelMap {
    LabelMap::new(r.height, r.width, r.values.clone()).expect("raster dimensions are positive")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PgmError> {
    fs::write(path, bytes).map_err(|source| PgmError::Io { path: path.display().to_string(), source })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PgmError> {
    fs::read(path).map_err(|source| PgmError::Io { path: path.display().to_string(), source })
}

pub fn write_image(image: &Tensor, path: &Path) -> Result<(), PgmError> {
    write_bytes(path, &encode(&image_raster(image)?)?)
}

pub fn read_image(path: &Path) -> Result<Tensor, PgmError> {
    Ok(raster_image(&decode(&read_bytes(path)?)?))
}

pub fn write_labels(labels: &LabelMap, maxval: u16, path: &Path) -> Result<(), PgmError> {
    write_bytes(path, &encode(&labels_raster(labels, maxval))?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap, PgmError> {
    Ok(raster_labels(&decode(&read_bytes(path)?)?))
}
