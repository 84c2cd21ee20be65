//! Single-band GeoTIFF on top of the `tiff` crate.
//!
//! Georeferencing is carried by `ModelPixelScaleTag` and `ModelTiepointTag`
//! (raster point (0,0) tied to the upper-left corner) plus a minimal
//! geographic `GeoKeyDirectoryTag` (EPSG:4326, PixelIsArea). Writing produces
//! uncompressed strips; reading accepts strip or tile layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use super::{to_u8_samples, IoError, SampleFormat};
use crate::raster::{Origin, Raster};

const GEO_KEYS: [u16; 16] = [
    1, 1, 0, 3, // header: version, revision, minor, key count
    1024, 0, 1, 2, // GTModelType = Geographic
    1025, 0, 1, 1, // GTRasterType = PixelIsArea
    2048, 0, 1, 4326, // GeographicType = WGS84
];

pub fn write_to<W: Write + Seek>(w: W, r: &Raster, format: SampleFormat) -> Result<(), IoError> {
    let mut enc = TiffEncoder::new(w)?;
    let scale = [r.pixel_size(), r.pixel_size(), 0.0];
    let tie = [0.0, 0.0, 0.0, r.origin().lon, r.origin().lat, 0.0];
    let nodata = r.nodata().map(|v| format!("{v}"));
    let (width, height) = (r.width() as u32, r.height() as u32);
    macro_rules! body {
        ($img:expr, $data:expr) => {{
            let mut img = $img;
            let dir = img.encoder();
            dir.write_tag(Tag::ModelPixelScaleTag, &scale[..])?;
            dir.write_tag(Tag::ModelTiepointTag, &tie[..])?;
            dir.write_tag(Tag::GeoKeyDirectoryTag, &GEO_KEYS[..])?;
            if let Some(nd) = &nodata {
                dir.write_tag(Tag::GdalNodata, nd.as_str())?;
            }
            img.write_data($data)?;
        }};
    }
    match format {
        SampleFormat::F32 => body!(
            enc.new_image::<colortype::Gray32Float>(width, height)?,
            r.values()
        ),
        SampleFormat::U8 => {
            let samples = to_u8_samples(r.values())?;
            body!(
                enc.new_image::<colortype::Gray8>(width, height)?,
                &samples[..]
            )
        }
    }
    Ok(())
}

pub fn read_from<R: Read + Seek>(reader: R) -> Result<(Raster, SampleFormat), IoError> {
    let mut dec = Decoder::new(reader)?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions()?;
    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)?
        .ok_or_else(|| IoError::Malformed("missing ModelPixelScaleTag".into()))?
        .into_f64_vec()?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)?
        .ok_or_else(|| IoError::Malformed("missing ModelTiepointTag".into()))?
        .into_f64_vec()?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(IoError::Malformed("short georeferencing tags".into()));
    }
    if (scale[0] - scale[1]).abs() > 1e-12 * scale[0].abs().max(1.0) {
        return Err(IoError::Unsupported(format!(
            "non-square pixels {} x {}",
            scale[0], scale[1]
        )));
    }
    let ps = scale[0];
    // Tiepoint may anchor any raster point; move it back to (0, 0).
    let origin = Origin {
        lon: tie[3] - tie[0] * ps,
        lat: tie[4] + tie[1] * ps,
    };
    let nodata = match dec.find_tag(Tag::GdalNodata)? {
        Some(v) => {
            let s = v.into_string()?;
            let s = s.trim_matches(char::from(0)).trim();
            Some(
                s.parse::<f32>()
                    .map_err(|_| IoError::Malformed(format!("nodata {s:?}")))?,
            )
        }
        None => None,
    };
    let (values, format) = match dec.read_image()? {
        DecodingResult::F32(v) => (v, SampleFormat::F32),
        DecodingResult::U8(v) => (v.into_iter().map(f32::from).collect(), SampleFormat::U8),
        _ => {
            return Err(IoError::Unsupported(
                "only 8-bit unsigned and 32-bit float samples".into(),
            ))
        }
    };
    if values.len() != (w as usize) * (h as usize) {
        return Err(IoError::Unsupported("multi-band images".into()));
    }
    let raster = Raster::new(w as usize, h as usize, ps, origin, values, nodata)?;
    Ok((raster, format))
}

pub fn write(path: impl AsRef<Path>, r: &Raster, format: SampleFormat) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path)?);
    write_to(&mut f, r, format)?;
    f.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Raster, SampleFormat), IoError> {
    read_from(BufReader::new(File::open(path)?))
}
