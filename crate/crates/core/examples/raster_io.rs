//! Write a georeferenced raster as GeoTIFF, read it back, and run the
//! radiometric chain: log1p, 8-bit quantization and bilinear resampling.

use ntlcut::raster::io::{geotiff, SampleFormat};
use ntlcut::raster::{
    dequantize_u8, inverse_log1p, log1p_transform, quantize_u8, resample_bilinear, Origin,
    RadiometricCalibration, Raster,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (96, 64);
    let px = 30.0 / 3600.0;
    // A bright core fading into a dim background.
    let values: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f32 - 48.0, (i / w) as f32 - 32.0);
            250.0 * (-(x * x + y * y) / 200.0).exp() + 0.2
        })
        .collect();
    let r = Raster::new(
        w,
        h,
        px,
        Origin {
            lon: 10.0,
            lat: 45.0,
        },
        values,
        None,
    )?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("scene.tif");
    geotiff::write(&path, &r, SampleFormat::F32)?;
    let (back, fmt) = geotiff::read(&path)?;
    println!(
        "read {}x{} {:?}, origin ({}, {}), identical values: {}",
        back.width(),
        back.height(),
        fmt,
        back.origin().lon,
        back.origin().lat,
        back.values() == r.values()
    );

    let logs = log1p_transform(&r)?;
    let cal = RadiometricCalibration::new(0.0, 5.6)?;
    let codes = quantize_u8(&logs, &cal)?;
    let radiance = inverse_log1p(&dequantize_u8(&codes, &cal)?)?;
    let worst = r
        .values()
        .iter()
        .zip(radiance.values())
        .map(|(a, b)| (a - b).abs() / a.max(1.0))
        .fold(0.0f32, f32::max);
    println!("8-bit round trip: worst relative radiance error {worst:.4}");

    let fine = resample_bilinear(&r, px / 2.0)?;
    println!(
        "resampled to {}x{} at {:.6} deg",
        fine.width(),
        fine.height(),
        fine.pixel_size()
    );
    Ok(())
}
