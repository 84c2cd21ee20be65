//! Paired synthetic scenes: a VIIRS-like radiance field with a land mask, and
//! a DMSP-like degraded copy (coarser, blurred, saturating 6-bit codes).

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Origin, Raster, RasterError};

/// Largest radiance a city peak may take (the VIIRS product maximum).
pub const MAX_PEAK_RADIANCE: f64 = 85_588.98;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_cities: usize,
    /// Gaussian sigma of the major axis, in pixels.
    pub city_radius_range: (f64, f64),
    pub city_peak_range: (f64, f64),
    pub n_roads: usize,
    pub road_radiance: f64,
    pub background_noise_sigma: f64,
    /// Standard deviation of the multiplicative speckle factor around 1.
    pub speckle_sigma: f64,
    pub land_fraction: f64,
    pub pixel_size: f64,
    pub origin: Origin,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            width: 128,
            height: 128,
            n_cities: 6,
            city_radius_range: (2.0, 9.0),
            city_peak_range: (200.0, 40000.0),
            n_roads: 4,
            road_radiance: 3.0,
            background_noise_sigma: 0.3,
            speckle_sigma: 0.1,
            land_fraction: 0.6,
            pixel_size: 0.5 / 120.0,
            origin: Origin { lon: 0.0, lat: 0.0 },
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty dimensions {}x{}", self.width, self.height));
        }
        let (rlo, rhi) = self.city_radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("city radius range {rlo}..{rhi}"));
        }
        let (plo, phi) = self.city_peak_range;
        if !(plo >= 0.0 && plo <= phi && phi <= MAX_PEAK_RADIANCE) {
            return bad(format!("city peak range {plo}..{phi}"));
        }
        if !(0.0..=1.0).contains(&self.land_fraction) {
            return bad(format!("land fraction {}", self.land_fraction));
        }
        if self.background_noise_sigma < 0.0 || self.speckle_sigma < 0.0 || self.road_radiance < 0.0
        {
            return bad("negative noise or road level".into());
        }
        if !(self.pixel_size > 0.0) {
            return bad(format!("pixel size {}", self.pixel_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct City {
    /// Center in pixel coordinates (pixel centers sit at `i + 0.5`).
    pub x: f64,
    pub y: f64,
    pub peak: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

/// Random scene geometry; rendering it is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    /// Unit normal of the straight coastline; land lies on the low side.
    pub coast_angle: f64,
    pub cities: Vec<City>,
    pub roads: Vec<Road>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub viirs: Raster,
    /// 1 on land, 0 on water.
    pub land: Raster,
}

fn land_mask_values(spec: &SceneSpec, angle: f64) -> Vec<f32> {
    let (w, h) = (spec.width, spec.height);
    let (c, s) = (angle.cos(), angle.sin());
    let mut order: Vec<(f64, usize)> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            (x * c + y * s, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_land = (spec.land_fraction * (w * h) as f64).round() as usize;
    let mut mask = vec![0.0f32; w * h];
    for &(_, i) in &order[..n_land] {
        mask[i] = 1.0;
    }
    mask
}

/// Draw the coastline, cities and roads for `spec`. Cities sit on land when
/// there is any.
pub fn layout(spec: &SceneSpec) -> Result<SceneLayout, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coast_angle = rng.gen_range(0.0..2.0 * PI);
    let mask = land_mask_values(spec, coast_angle);
    let land: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] > 0.5).collect();
    let mut cities = Vec::with_capacity(spec.n_cities);
    for _ in 0..spec.n_cities {
        let i = if land.is_empty() {
            rng.gen_range(0..spec.width * spec.height)
        } else {
            land[rng.gen_range(0..land.len())]
        };
        let (rlo, rhi) = spec.city_radius_range;
        let (plo, phi) = spec.city_peak_range;
        // Peaks follow a log-uniform law so dim towns outnumber metropolises.
        let peak = if plo > 0.0 {
            (rng.gen_range(plo.ln()..=phi.ln())).exp()
        } else {
            rng.gen_range(plo..=phi)
        };
        let sigma_major = rng.gen_range(rlo..=rhi);
        cities.push(City {
            x: (i % spec.width) as f64 + rng.gen_range(0.0..1.0),
            y: (i / spec.width) as f64 + rng.gen_range(0.0..1.0),
            peak,
            sigma_major,
            sigma_minor: sigma_major * rng.gen_range(0.5..=1.0),
            angle: rng.gen_range(0.0..PI),
        });
    }
    let mut roads = Vec::with_capacity(spec.n_roads);
    for _ in 0..spec.n_roads {
        let road = if cities.len() >= 2 {
            let a = rng.gen_range(0..cities.len());
            let b = (a + 1 + rng.gen_range(0..cities.len() - 1)) % cities.len();
            Road {
                from: (cities[a].x, cities[a].y),
                to: (cities[b].x, cities[b].y),
            }
        } else {
            let p = |rng: &mut ChaCha8Rng| {
                (
                    rng.gen_range(0.0..spec.width as f64),
                    rng.gen_range(0.0..spec.height as f64),
                )
            };
            let (from, to) = (p(&mut rng), p(&mut rng));
            Road { from, to }
        };
        roads.push(road);
    }
    Ok(SceneLayout {
        coast_angle,
        cities,
        roads,
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Render `layout` under `spec`. Lights are confined to land; speckle and
/// background noise are drawn from a stream seeded by `spec.seed`.
pub fn render(spec: &SceneSpec, layout: &SceneLayout) -> Result<Scene, SynthError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mask = land_mask_values(spec, layout.coast_angle);
    let mut field = vec![0.0f64; w * h];
    for c in &layout.cities {
        let (ca, sa) = (c.angle.cos(), c.angle.sin());
        let reach = 4.0 * c.sigma_major;
        let y0 = ((c.y - reach).floor().max(0.0)) as usize;
        let y1 = ((c.y + reach).ceil().min(h as f64)) as usize;
        let x0 = ((c.x - reach).floor().max(0.0)) as usize;
        let x1 = ((c.x + reach).ceil().min(w as f64)) as usize;
        for row in y0..y1 {
            for col in x0..x1 {
                let (dx, dy) = (col as f64 + 0.5 - c.x, row as f64 + 0.5 - c.y);
                let (u, v) = (dx * ca + dy * sa, -dx * sa + dy * ca);
                let e = 0.5
                    * (u * u / (c.sigma_major * c.sigma_major)
                        + v * v / (c.sigma_minor * c.sigma_minor));
                field[row * w + col] += c.peak * (-e).exp();
            }
        }
    }
    if spec.road_radiance > 0.0 {
        for r in &layout.roads {
            for (i, f) in field.iter_mut().enumerate() {
                let p = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                let d = segment_distance(p, r.from, r.to);
                if d < 3.0 {
                    *f += spec.road_radiance * (-(d * d) / (2.0 * 0.7 * 0.7)).exp();
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let speckle =
        Normal::new(1.0, spec.speckle_sigma).map_err(|e| SynthError::Spec(e.to_string()))?;
    let noise = Normal::new(0.0, spec.background_noise_sigma)
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    let values: Vec<f32> = field
        .iter()
        .zip(&mask)
        .map(|(&f, &m)| {
            let s: f64 = speckle.sample(&mut rng);
            let n: f64 = noise.sample(&mut rng);
            (f * m as f64 * s.max(0.0) + n).max(0.0) as f32
        })
        .collect();
    let viirs = Raster::new(w, h, spec.pixel_size, spec.origin, values, None)?;
    let land = Raster::new(w, h, spec.pixel_size, spec.origin, mask, None)?;
    Ok(Scene { viirs, land })
}

/// VIIRS-like radiance scene and its land mask.
pub fn generate_viirs_like(spec: &SceneSpec) -> Result<Scene, SynthError> {
    render(spec, &layout(spec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    /// Half-saturation constant of `63 x / (x + k)`.
    pub k: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            k: 30.0,
        }
    }
}

/// Saturating radiance-to-DN map, rounded and clamped to 0..=63.
pub fn compress_to_dn(x: f64, k: f64) -> f64 {
    let x = x.max(0.0);
    (63.0 * x / (x + k)).round().clamp(0.0, 63.0)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * values[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// The coarse 6-bit grid before the final upsampling: 2× box mean, blur,
/// saturating compression. Returns (values, width, height).
pub fn degrade_coarse(
    viirs: &Raster,
    p: DegradeParams,
) -> Result<(Vec<f64>, usize, usize), SynthError> {
    let (w, h) = (viirs.width(), viirs.height());
    if w < 2 || h < 2 {
        return Err(SynthError::Spec(format!(
            "raster {w}x{h} too small to degrade"
        )));
    }
    let (cw, ch) = (w / 2, h / 2);
    let v = viirs.values();
    let mut coarse = vec![0.0f64; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let s = v[2 * y * w + 2 * x] as f64
                + v[2 * y * w + 2 * x + 1] as f64
                + v[(2 * y + 1) * w + 2 * x] as f64
                + v[(2 * y + 1) * w + 2 * x + 1] as f64;
            coarse[y * cw + x] = s / 4.0;
        }
    }
    let blurred = gaussian_blur(&coarse, cw, ch, p.blur_sigma);
    Ok((
        blurred.iter().map(|&x| compress_to_dn(x, p.k)).collect(),
        cw,
        ch,
    ))
}

/// DMSP-like counterpart of `viirs` on the same grid.
pub fn degrade_to_dmsp_like(viirs: &Raster, p: DegradeParams) -> Result<Raster, SynthError> {
    let (dn, cw, ch) = degrade_coarse(viirs, p)?;
    let coarse = Raster::new(
        cw,
        ch,
        viirs.pixel_size() * viirs.width() as f64 / cw as f64,
        viirs.origin(),
        dn.iter().map(|&v| v as f32).collect(),
        None,
    )?;
    Ok(crate::raster::resample_to(
        &coarse,
        viirs.width(),
        viirs.height(),
        viirs.pixel_size(),
    )?)
}

/// A set of paired scenes laid out on a regular geographic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSetConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub base: SceneSpec,
    /// Scenes per grid row.
    pub columns: usize,
    /// Degrees between neighbouring scene origins.
    pub spacing_deg: f64,
    /// Upper-left origin of the first scene.
    pub first_origin: Origin,
    pub n_cities_range: (usize, usize),
    pub land_fraction_range: (f64, f64),
    pub degrade: DegradeParams,
}

impl Default for SceneSetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            seed: 42,
            base: SceneSpec::default(),
            columns: 20,
            spacing_deg: 2.5,
            first_origin: Origin {
                lon: 0.25,
                lat: 62.25,
            },
            n_cities_range: (2, 10),
            land_fraction_range: (0.05, 1.0),
            degrade: DegradeParams::default(),
        }
    }
}

impl SceneSetConfig {
    /// Per-scene specs; scene `i` sits at grid cell (i % columns, i / columns).
    pub fn specs(&self) -> Result<Vec<SceneSpec>, SynthError> {
        if self.columns == 0 || !(self.spacing_deg > 0.0) {
            return Err(SynthError::Spec(
                "columns and spacing must be positive".into(),
            ));
        }
        let (clo, chi) = self.n_cities_range;
        let (llo, lhi) = self.land_fraction_range;
        if clo > chi || !(0.0..=1.0).contains(&llo) || !(llo..=1.0).contains(&lhi) {
            return Err(SynthError::Spec("bad city or land fraction range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_scenes)
            .map(|i| {
                let spec = SceneSpec {
                    seed: rng.gen(),
                    n_cities: rng.gen_range(clo..=chi),
                    land_fraction: rng.gen_range(llo..=lhi),
                    origin: Origin {
                        lon: self.first_origin.lon + (i % self.columns) as f64 * self.spacing_deg,
                        lat: self.first_origin.lat - (i / self.columns) as f64 * self.spacing_deg,
                    },
                    ..self.base.clone()
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            background_noise_sigma: 0.0,
            speckle_sigma: 0.0,
            n_roads: 0,
            land_fraction: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_is_zero() {
        let spec = SceneSpec {
            n_cities: 0,
            n_roads: 0,
            background_noise_sigma: 0.0,
            ..quiet(1)
        };
        let s = generate_viirs_like(&spec).unwrap();
        assert!(s.viirs.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_city_peak_is_exact() {
        let spec = SceneSpec {
            width: 33,
            height: 33,
            ..quiet(2)
        };
        let city = City {
            x: 16.5,
            y: 16.5,
            peak: 100.0,
            sigma_major: 5.0,
            sigma_minor: 5.0,
            angle: 0.0,
        };
        let lay = SceneLayout {
            coast_angle: 0.0,
            cities: vec![city],
            roads: vec![],
        };
        let s = render(&spec, &lay).unwrap();
        let max = s.viirs.values().iter().copied().fold(f32::MIN, f32::max);
        assert_eq!(max, 100.0);
        assert_eq!(s.viirs.get(16, 16), 100.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec {
            seed: 7,
            ..Default::default()
        };
        let a = generate_viirs_like(&spec).unwrap();
        let b = generate_viirs_like(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_viirs_like(&SceneSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.viirs, c.viirs);
    }

    #[test]
    fn land_fraction_is_honored() {
        for lf in [0.0, 0.3, 0.75, 1.0] {
            let spec = SceneSpec {
                land_fraction: lf,
                ..Default::default()
            };
            let s = generate_viirs_like(&spec).unwrap();
            let frac = s.land.values().iter().map(|&v| v as f64).sum::<f64>() / (128.0 * 128.0);
            assert!((frac - lf).abs() < 1e-4, "{frac} vs {lf}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate_viirs_like(&SceneSpec {
            width: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate_viirs_like(&SceneSpec {
            city_peak_range: (1.0, 1e5),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn degrade_zero_and_saturation() {
        let o = Origin { lon: 0.0, lat: 0.0 };
        let zero = Raster::filled(16, 16, 0.01, o, 0.0).unwrap();
        let d = degrade_to_dmsp_like(&zero, DegradeParams::default()).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
        let bright = Raster::filled(16, 16, 0.01, o, 1e4).unwrap();
        let d = degrade_to_dmsp_like(&bright, DegradeParams::default()).unwrap();
        assert!(d.values().iter().all(|&v| (v - 63.0).abs() < 1e-4));
        assert_eq!(d.width(), 16);
    }

    #[test]
    fn coarse_codes_are_integers_in_range() {
        let s = generate_viirs_like(&SceneSpec {
            city_peak_range: (8000.0, 20000.0),
            ..Default::default()
        })
        .unwrap();
        let (dn, cw, ch) = degrade_coarse(&s.viirs, DegradeParams::default()).unwrap();
        assert_eq!((cw, ch), (64, 64));
        assert!(dn
            .iter()
            .all(|&v| v.fract() == 0.0 && (0.0..=63.0).contains(&v)));
        assert!(dn.contains(&63.0));
    }
}
