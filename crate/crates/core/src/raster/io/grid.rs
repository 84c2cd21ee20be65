//! Binary grid layout (little-endian):
//!
//! ```text
//! width u32 | height u32 | pixel_size f64 | origin_lon f64 | origin_lat f64 | dtype u8
//! samples (width*height of f32 or u8, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{to_u8_samples, IoError, SampleFormat};
use crate::raster::{Origin, Raster};

pub const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 1;

pub fn encode(r: &Raster, format: SampleFormat) -> Result<Vec<u8>, IoError> {
    let n = r.width() * r.height();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 4);
    buf.extend_from_slice(&(r.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.height() as u32).to_le_bytes());
    buf.extend_from_slice(&r.pixel_size().to_le_bytes());
    buf.extend_from_slice(&r.origin().lon.to_le_bytes());
    buf.extend_from_slice(&r.origin().lat.to_le_bytes());
    buf.push(format.code());
    match format {
        SampleFormat::F32 => r
            .values()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        SampleFormat::U8 => buf.extend_from_slice(&to_u8_samples(r.values())?),
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Raster, SampleFormat), IoError> {
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Malformed(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (w, h) = (u32_at(0), u32_at(4));
    let pixel_size = f64_at(8);
    let origin = Origin {
        lon: f64_at(16),
        lat: f64_at(24),
    };
    let format = SampleFormat::from_code(bytes[32])?;
    let body = &bytes[HEADER_LEN..];
    let n = w * h;
    let values: Vec<f32> = match format {
        SampleFormat::F32 => {
            if body.len() != n * 4 {
                return Err(IoError::Malformed(format!(
                    "expected {} sample bytes, found {}",
                    n * 4,
                    body.len()
                )));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        SampleFormat::U8 => {
            if body.len() != n {
                return Err(IoError::Malformed(format!(
                    "expected {n} sample bytes, found {}",
                    body.len()
                )));
            }
            body.iter().map(|&b| b as f32).collect()
        }
    };
    Ok((Raster::new(w, h, pixel_size, origin, values, None)?, format))
}

pub fn write(path: impl AsRef<Path>, r: &Raster, format: SampleFormat) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode(r, format)?)?;
    f.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Raster, SampleFormat), IoError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
