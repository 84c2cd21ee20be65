//! Patch extraction, spatial and radiometric filtering, calibration-range
//! estimation and the geographic block split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{quantile_in_place, RadiometricCalibration, Raster, RasterError};

/// Side of a geographic split block, in degrees.
pub const BLOCK_DEGREES: f64 = 5.0;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("patch size {0} is below the minimum of 8")]
    BadPatchSize(usize),
    #[error("raster {width}x{height} is smaller than the patch size {size}")]
    RasterTooSmall {
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("land mask grid does not match the source raster")]
    MaskMismatch,
    #[error("only {0} geographic block(s); at least 3 are needed for a three-way split")]
    TooFewBlocks(usize),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Fractions([f64; 3]),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Dmsp,
    Viirs,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Dmsp => "dmsp",
            Domain::Viirs => "viirs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Index of a `BLOCK_DEGREES` cell counted from (-180, -90).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GeoBlock {
    pub col: i32,
    pub row: i32,
}

impl GeoBlock {
    pub fn containing(lon: f64, lat: f64) -> Self {
        Self {
            col: ((lon + 180.0) / BLOCK_DEGREES).floor() as i32,
            row: ((lat + 90.0) / BLOCK_DEGREES).floor() as i32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Raw values (radiance or DN), row-major `size`×`size`.
    pub data: Vec<f32>,
    pub size: usize,
    pub source_domain: Domain,
    /// Tile column and row.
    pub tile_xy: (usize, usize),
    /// Geographic (lon, lat) of the patch center.
    pub center: (f64, f64),
    pub geo_block: GeoBlock,
    pub split: Option<Split>,
    /// Set by [`spatial_filter`].
    pub land_fraction: Option<f64>,
    pub mean_log1p: f64,
    pub std_log1p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub min_land_fraction: f64,
    pub max_abs_latitude: f64,
    pub tau_dark: f64,
    pub tau_uniform: f64,
    pub clip_quantile: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_land_fraction: 0.30,
            max_abs_latitude: 60.0,
            tau_dark: 0.1,
            tau_uniform: 0.05,
            clip_quantile: 0.999,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PreprocessError::Thresholds(m.into()));
        if !(0.0..=1.0).contains(&self.min_land_fraction) {
            return bad("min_land_fraction outside [0, 1]");
        }
        if !(0.0..=90.0).contains(&self.max_abs_latitude) {
            return bad("max_abs_latitude outside [0, 90]");
        }
        if !(self.tau_dark >= 0.0 && self.tau_uniform >= 0.0) {
            return bad("negative radiometric threshold");
        }
        if !(self.clip_quantile > 0.5 && self.clip_quantile <= 1.0) {
            return bad("clip_quantile outside (0.5, 1]");
        }
        Ok(())
    }

    pub fn spatial_keep(&self, land_fraction: f64, lat: f64) -> bool {
        land_fraction >= self.min_land_fraction && lat.abs() <= self.max_abs_latitude
    }

    pub fn radiometric_keep(&self, mean_log1p: f64, std_log1p: f64) -> bool {
        mean_log1p >= self.tau_dark && std_log1p >= self.tau_uniform
    }
}

/// Mean and population standard deviation of `log1p(max(v, 0))`.
pub fn log1p_moments(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let logs: Vec<f64> = values
        .iter()
        .map(|&v| (v.max(0.0) as f64).ln_1p())
        .collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Non-overlapping `size`×`size` tiles in row-major tile order; partial
/// tiles at the right and bottom edges are dropped.
pub fn extract_patches(r: &Raster, size: usize, domain: Domain) -> Result<Vec<Patch>> {
    if size < 8 {
        return Err(PreprocessError::BadPatchSize(size));
    }
    if r.width() < size || r.height() < size {
        return Err(PreprocessError::RasterTooSmall {
            width: r.width(),
            height: r.height(),
            size,
        });
    }
    let (nx, ny) = (r.width() / size, r.height() / size);
    let mut out = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            let data = r.window(tx * size, ty * size, size, size)?.into_values();
            let half = size as f64 / 2.0;
            let center = (
                r.origin().lon + ((tx * size) as f64 + half) * r.pixel_size(),
                r.origin().lat - ((ty * size) as f64 + half) * r.pixel_size(),
            );
            let (mean_log1p, std_log1p) = log1p_moments(&data);
            out.push(Patch {
                data,
                size,
                source_domain: domain,
                tile_xy: (tx, ty),
                center,
                geo_block: GeoBlock::containing(center.0, center.1),
                split: None,
                land_fraction: None,
                mean_log1p,
                std_log1p,
            });
        }
    }
    Ok(out)
}

/// Annotate land fractions from `land_mask` (values above 0.5 are land) and
/// keep patches on enough land and within the latitude limit.
pub fn spatial_filter(
    patches: Vec<Patch>,
    source: &Raster,
    land_mask: &Raster,
    t: &FilterThresholds,
) -> Result<Vec<Patch>> {
    if !source.same_grid(land_mask) {
        return Err(PreprocessError::MaskMismatch);
    }
    let mut kept = Vec::with_capacity(patches.len());
    for mut p in patches {
        let (tx, ty) = p.tile_xy;
        let win = land_mask.window(tx * p.size, ty * p.size, p.size, p.size)?;
        let land =
            win.values().iter().filter(|&&v| v > 0.5).count() as f64 / (p.size * p.size) as f64;
        p.land_fraction = Some(land);
        if t.spatial_keep(land, p.center.1) {
            kept.push(p);
        }
    }
    Ok(kept)
}

pub fn radiometric_filter(patches: Vec<Patch>, t: &FilterThresholds) -> Vec<Patch> {
    patches
        .into_iter()
        .filter(|p| t.radiometric_keep(p.mean_log1p, p.std_log1p))
        .collect()
}

/// Clip range from the `1 - clip_quantile` and `clip_quantile` quantiles of
/// log1p-domain values.
pub fn calibration_from_values(
    values: &mut [f64],
    clip_quantile: f64,
) -> Result<RadiometricCalibration> {
    let v_min = quantile_in_place(values, 1.0 - clip_quantile)?;
    let v_max = quantile_in_place(values, clip_quantile)?;
    Ok(RadiometricCalibration::new(v_min.max(0.0), v_max)?)
}

/// Calibration range of a log1p-domain raster.
pub fn estimate_calibration(r: &Raster, clip_quantile: f64) -> Result<RadiometricCalibration> {
    let mut vals: Vec<f64> = r.valid_values().map(f64::from).collect();
    calibration_from_values(&mut vals, clip_quantile)
}

/// Largest-remainder apportionment of `n` items over `fractions`. Ties in the
/// remainder go to the earlier split; every split then receives at least one
/// item, taken from the currently largest split.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = (quotas[i] + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap().then(a.cmp(&b)));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if counts[i] == 0 {
                let big = (0..3)
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .unwrap();
                counts[big] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Assign every distinct block wholly to one split. Blocks are ordered, then
/// shuffled with a seeded generator; the first `counts[0]` go to train, the
/// next `counts[1]` to val, the rest to test.
pub fn assign_blocks(
    blocks: &BTreeSet<GeoBlock>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<GeoBlock, Split>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(PreprocessError::Fractions(fractions));
    }
    if blocks.len() < 3 {
        return Err(PreprocessError::TooFewBlocks(blocks.len()));
    }
    let mut order: Vec<GeoBlock> = blocks.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = apportion(order.len(), fractions);
    let mut map = BTreeMap::new();
    for (i, b) in order.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        map.insert(b, split);
    }
    Ok(map)
}

pub fn split_by_blocks(
    patches: &mut [Patch],
    fractions: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<GeoBlock, Split>> {
    let blocks: BTreeSet<GeoBlock> = patches.iter().map(|p| p.geo_block).collect();
    let map = assign_blocks(&blocks, fractions, seed)?;
    for p in patches.iter_mut() {
        p.split = Some(map[&p.geo_block]);
    }
    Ok(map)
}
