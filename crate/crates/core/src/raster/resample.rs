use super::{Raster, RasterError, Result};

/// Output grid dimensions when resampling `width`×`height` pixels of size
/// `pixel_size` onto `target_pixel_size`, keeping the geographic extent.
pub fn resampled_dims(
    width: usize,
    height: usize,
    pixel_size: f64,
    target_pixel_size: f64,
) -> (usize, usize) {
    let scale = pixel_size / target_pixel_size;
    (
        (width as f64 * scale).round() as usize,
        (height as f64 * scale).round() as usize,
    )
}

/// Bilinear resampling onto a grid with `target_pixel_size`.
///
/// Output pixel centers are mapped back into input pixel coordinates and
/// interpolated from the four surrounding input centers; positions outside
/// the outermost centers are clamped to the edge.
pub fn resample_bilinear(r: &Raster, target_pixel_size: f64) -> Result<Raster> {
    if !(target_pixel_size > 0.0 && target_pixel_size.is_finite()) {
        return Err(RasterError::Invalid(format!(
            "target pixel size {target_pixel_size}"
        )));
    }
    let (ow, oh) = resampled_dims(r.width(), r.height(), r.pixel_size(), target_pixel_size);
    resample_to(r, ow, oh, target_pixel_size)
}

/// Bilinear resampling onto an explicit `width`×`height` grid that covers the
/// same extent as `r`.
pub fn resample_to(r: &Raster, ow: usize, oh: usize, target_pixel_size: f64) -> Result<Raster> {
    if ow == 0 || oh == 0 {
        return Err(RasterError::ExtentMismatch {
            width: ow,
            height: oh,
        });
    }
    let sx = r.width() as f64 / ow as f64;
    let sy = r.height() as f64 / oh as f64;
    let xs: Vec<(usize, usize, f32)> = (0..ow)
        .map(|j| taps((j as f64 + 0.5) * sx - 0.5, r.width()))
        .collect();
    let mut out = Vec::with_capacity(ow * oh);
    let src = r.values();
    let w = r.width();
    for i in 0..oh {
        let (y0, y1, fy) = taps((i as f64 + 0.5) * sy - 0.5, r.height());
        let row0 = &src[y0 * w..(y0 + 1) * w];
        let row1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = row0[x0] + fx * (row0[x1] - row0[x0]);
            let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
            out.push(top + fy * (bot - top));
        }
    }
    Raster::new(ow, oh, target_pixel_size, r.origin(), out, None)
}

fn taps(u: f64, n: usize) -> (usize, usize, f32) {
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, (u - i0 as f64) as f32)
}
