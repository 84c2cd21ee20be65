//! Flat binary tensor checkpoints.
//!
//! ```text
//! version u8 | entry count u32
//! per entry: name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | offset u64 (elements)
//! payload: little-endian f32, entries laid out at their offsets
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn encode<T: Scalar>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut head = vec![VERSION];
    head.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in entries {
        head.extend_from_slice(&(name.len() as u16).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(t.shape().len() as u8);
        for &d in t.shape() {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64;
    }
    head.reserve(offset as usize * 4);
    for (_, t) in entries {
        for v in t.data() {
            head.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    head
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end
            .ok_or_else(|| CheckpointError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let mut c = Cursor { b: bytes, pos: 0 };
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize);
        }
        let offset = u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[c.pos..];
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let start = offset * 4;
        let slice = payload.get(start..start + n * 4).ok_or_else(|| {
            CheckpointError::Malformed(format!("{name} extends past the payload"))
        })?;
        let data = slice
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(String, Tensor<T>)],
) -> Result<(), CheckpointError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode(entries))?;
    f.flush()?;
    Ok(())
}

pub fn read<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_roundtrip() {
        let entries = vec![
            (
                "G/w".to_string(),
                Tensor::new(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ),
            (
                "G/b".to_string(),
                Tensor::new(&[2], vec![-0.5f32, 0.25]).unwrap(),
            ),
        ];
        let bytes = encode(&entries);
        assert_eq!(bytes[0], VERSION);
        assert_eq!(&bytes[1..5], &2u32.to_le_bytes());
        let head = 5 + (2 + 3 + 1 + 8 + 8) + (2 + 3 + 1 + 4 + 8);
        assert_eq!(bytes.len(), head + 8 * 4);
        assert_eq!(&bytes[head..head + 4], &1.0f32.to_le_bytes());
        assert_eq!(decode::<f32>(&bytes).unwrap(), entries);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            decode::<f32>(&[9, 0, 0, 0, 0]),
            Err(CheckpointError::Version(9))
        ));
        let mut bytes = encode(&[(
            "x".to_string(),
            Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap(),
        )]);
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
