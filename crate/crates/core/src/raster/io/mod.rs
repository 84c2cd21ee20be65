//! Raster file formats: a plain little-endian binary grid (the canonical
//! fixture format) and single-band GeoTIFF.

pub mod geotiff;
pub mod grid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RasterError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// On-disk sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    F32,
    U8,
}

impl SampleFormat {
    pub fn code(self) -> u8 {
        match self {
            SampleFormat::F32 => 0,
            SampleFormat::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, IoError> {
        match code {
            0 => Ok(SampleFormat::F32),
            1 => Ok(SampleFormat::U8),
            c => Err(IoError::Unsupported(format!("dtype code {c}"))),
        }
    }
}

pub(crate) fn to_u8_samples(values: &[f32]) -> Result<Vec<u8>, IoError> {
    values
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(IoError::Unsupported(format!(
                    "value {v} is not an 8-bit code"
                )))
            }
        })
        .collect()
}
