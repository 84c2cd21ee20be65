//! Single-band georeferenced rasters and the radiometric transforms applied
//! to them before training: `log1p`, percentile clipping, 8-bit quantization
//! and its inverse, and bilinear resampling.
//!
//! Values are stored as `f32`; every reduction (percentiles, moments) is
//! carried out in `f64`.

pub mod io;
mod resample;

pub use resample::{resample_bilinear, resample_to, resampled_dims};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("value {value} at index {index} is outside the log1p domain (< -1)")]
    Domain { index: usize, value: f32 },
    #[error("NaN encountered at index {0}")]
    PropagatedNaN(usize),
    #[error("exp overflow at index {index} (input {value})")]
    Overflow { index: usize, value: f32 },
    #[error("raster has no valid (non-nodata) pixels")]
    EmptyRaster,
    #[error("degenerate calibration: v_min={v_min}, v_max={v_max}")]
    DegenerateCalibration { v_min: f64, v_max: f64 },
    #[error("quantile {0} outside [0, 1]")]
    BadQuantile(f64),
    #[error("resampled extent would be empty ({width}x{height})")]
    ExtentMismatch { width: usize, height: usize },
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Upper-left corner of the upper-left pixel, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixel_size: f64,
    origin: Origin,
    values: Vec<f32>,
    nodata: Option<f32>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin: Origin,
        values: Vec<f32>,
        nodata: Option<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid(format!("empty grid {width}x{height}")));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(RasterError::Invalid(format!("pixel size {pixel_size}")));
        }
        if values.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        let r = Self {
            width,
            height,
            pixel_size,
            origin,
            values,
            nodata,
        };
        if let Some(i) = r
            .values
            .iter()
            .enumerate()
            .position(|(_, v)| !v.is_finite() && !r.is_nodata(*v))
        {
            return Err(RasterError::Invalid(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(r)
    }

    pub fn filled(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin: Origin,
        value: f32,
    ) -> Result<Self> {
        Self::new(
            width,
            height,
            pixel_size,
            origin,
            vec![value; width * height],
            None,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// Iterator over valid (non-nodata) values.
    pub fn valid_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.values
            .iter()
            .copied()
            .filter(move |v| !self.is_nodata(*v))
    }

    /// Same georeferencing, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.pixel_size,
            self.origin,
            values,
            self.nodata,
        )
    }

    pub fn same_grid(&self, other: &Raster) -> bool {
        self.width == other.width
            && self.height == other.height
            && (self.pixel_size - other.pixel_size).abs() <= 1e-12 * self.pixel_size.max(1.0)
            && (self.origin.lon - other.origin.lon).abs() < 1e-9
            && (self.origin.lat - other.origin.lat).abs() < 1e-9
    }

    /// Geographic (lon, lat) of the center of pixel (col, row).
    pub fn pixel_center(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin.lon + (col + 0.5) * self.pixel_size,
            self.origin.lat - (row + 0.5) * self.pixel_size,
        )
    }

    /// Copy out a `w`×`h` window starting at (`col`, `row`).
    pub fn window(&self, col: usize, row: usize, w: usize, h: usize) -> Result<Raster> {
        if col + w > self.width || row + h > self.height || w == 0 || h == 0 {
            return Err(RasterError::Invalid(format!(
                "window {w}x{h}+{col}+{row} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for r in row..row + h {
            out.extend_from_slice(&self.values[r * self.width + col..r * self.width + col + w]);
        }
        let origin = Origin {
            lon: self.origin.lon + col as f64 * self.pixel_size,
            lat: self.origin.lat - row as f64 * self.pixel_size,
        };
        Raster::new(w, h, self.pixel_size, origin, out, self.nodata)
    }

    fn map_valid(&self, mut f: impl FnMut(usize, f32) -> Result<f32>) -> Result<Raster> {
        let mut out = Vec::with_capacity(self.values.len());
        for (i, &v) in self.values.iter().enumerate() {
            if self.is_nodata(v) {
                out.push(v);
            } else {
                out.push(f(i, v)?);
            }
        }
        self.with_values(out)
    }
}

/// Clamp negative radiance (sensor noise) to zero. Applied before `log1p`.
pub fn clamp_negative(r: &Raster) -> Raster {
    r.map_valid(|_, v| Ok(v.max(0.0)))
        .expect("clamping keeps values finite")
}

pub fn log1p_transform(r: &Raster) -> Result<Raster> {
    r.map_valid(|i, v| {
        if v.is_nan() {
            return Err(RasterError::PropagatedNaN(i));
        }
        if v < -1.0 {
            return Err(RasterError::Domain { index: i, value: v });
        }
        let y = (v as f64).ln_1p();
        if !y.is_finite() {
            return Err(RasterError::Domain { index: i, value: v });
        }
        Ok(y as f32)
    })
}

pub fn inverse_log1p(r: &Raster) -> Result<Raster> {
    r.map_valid(|i, v| {
        let x = (v as f64).exp_m1() as f32;
        if !x.is_finite() {
            return Err(RasterError::Overflow { index: i, value: v });
        }
        Ok(x)
    })
}

/// Inclusive (linear interpolation between order statistics) quantile of a
/// sample. `values` is reordered in place.
pub fn quantile_in_place(values: &mut [f64], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(RasterError::BadQuantile(q));
    }
    if values.is_empty() {
        return Err(RasterError::EmptyRaster);
    }
    let n = values.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return Ok(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// `q`-quantile over the valid pixels of `r`.
pub fn percentile(r: &Raster, q: f64) -> Result<f64> {
    let mut vals: Vec<f64> = r.valid_values().map(f64::from).collect();
    quantile_in_place(&mut vals, q)
}

/// Clip range of the log1p-domain radiance used by 8-bit quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiometricCalibration {
    pub v_min: f64,
    pub v_max: f64,
}

impl RadiometricCalibration {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite()) || v_min < 0.0 || v_max - v_min < 1e-9 {
            return Err(RasterError::DegenerateCalibration { v_min, v_max });
        }
        Ok(Self { v_min, v_max })
    }

    pub fn span(&self) -> f64 {
        self.v_max - self.v_min
    }

    /// Map one log1p value to its 8-bit code.
    pub fn quantize_value(&self, v: f64) -> u8 {
        if v >= self.v_max {
            return 255;
        }
        let t = (v.max(self.v_min) - self.v_min) / self.span();
        // The nudge keeps exact bin edges (dequantized codes) in their own bin.
        (255.0 * t + 1e-9).floor().clamp(0.0, 255.0) as u8
    }

    /// Inverse map of an 8-bit code (fractional codes are allowed).
    pub fn dequantize_value(&self, code: f64) -> f64 {
        self.v_min + (code / 255.0) * self.span()
    }
}

pub fn quantize_u8(r: &Raster, cal: &RadiometricCalibration) -> Result<Raster> {
    if cal.span() < 1e-9 {
        return Err(RasterError::DegenerateCalibration {
            v_min: cal.v_min,
            v_max: cal.v_max,
        });
    }
    r.map_valid(|_, v| Ok(cal.quantize_value(v as f64) as f32))
}

pub fn dequantize_u8(r: &Raster, cal: &RadiometricCalibration) -> Result<Raster> {
    r.map_valid(|i, v| {
        if !(0.0..=255.0).contains(&v) {
            return Err(RasterError::Invalid(format!(
                "code {v} at index {i} outside [0, 255]"
            )));
        }
        Ok(cal.dequantize_value(v as f64) as f32)
    })
}
