//! Straightforward re-implementation of tiling, filtering and block splitting
//! for cross-checking the library on fixtures.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RefTile {
    pub tx: usize,
    pub ty: usize,
    pub lon: f64,
    pub lat: f64,
    pub land: f64,
    pub mean: f64,
    pub std: f64,
    pub spatial_ok: bool,
    pub radiometric_ok: bool,
    pub block: (i32, i32),
}

pub struct Fixture {
    pub w: usize,
    pub h: usize,
    pub pixel: f64,
    pub lon0: f64,
    pub lat0: f64,
    pub values: Vec<f32>,
    pub mask: Vec<f32>,
}

/// Tiles of different character (dark, flat, textured, partly water) on a
/// grid crossing 60°N.
pub fn fixture(size: usize, tile: usize, seed: u64) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (size, size);
    let mut values = vec![0.0f32; w * h];
    let mut mask = vec![0.0f32; w * h];
    let coast = r.gen_range(0.2..0.8) * w as f64;
    for ty in 0..h / tile {
        for tx in 0..w / tile {
            let kind = r.gen_range(0..4);
            let level: f32 = r.gen_range(0.5..200.0);
            for y in ty * tile..(ty + 1) * tile {
                for x in tx * tile..(tx + 1) * tile {
                    let v = match kind {
                        0 => r.gen_range(0.0..0.05),
                        1 => level,
                        2 => level * r.gen_range(0.0f32..1.0).powi(3),
                        _ => r.gen_range(0.0..2.0),
                    };
                    values[y * w + x] = v;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let wobble = 40.0 * ((y as f64) / 90.0).sin();
            mask[y * w + x] = if (x as f64) < coast + wobble {
                1.0
            } else {
                0.0
            };
        }
    }
    Fixture {
        w,
        h,
        pixel: 0.02,
        lon0: 3.0,
        lat0: 64.0,
        values,
        mask,
    }
}

pub fn tiles(
    f: &Fixture,
    tile: usize,
    min_land: f64,
    max_lat: f64,
    tau_dark: f64,
    tau_uniform: f64,
) -> Vec<RefTile> {
    let mut out = Vec::new();
    for ty in 0..f.h / tile {
        for tx in 0..f.w / tile {
            let mut logs = Vec::new();
            let mut land = 0usize;
            for y in ty * tile..(ty + 1) * tile {
                for x in tx * tile..(tx + 1) * tile {
                    logs.push((f.values[y * f.w + x].max(0.0) as f64).ln_1p());
                    if f.mask[y * f.w + x] > 0.5 {
                        land += 1;
                    }
                }
            }
            let n = logs.len() as f64;
            let mean = logs.iter().sum::<f64>() / n;
            let std = (logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
            let lon = f.lon0 + (tx as f64 + 0.5) * tile as f64 * f.pixel;
            let lat = f.lat0 - (ty as f64 + 0.5) * tile as f64 * f.pixel;
            let land = land as f64 / n;
            out.push(RefTile {
                tx,
                ty,
                lon,
                lat,
                land,
                mean,
                std,
                spatial_ok: land >= min_land && lat.abs() <= max_lat,
                radiometric_ok: mean >= tau_dark && std >= tau_uniform,
                block: (
                    ((lon + 180.0) / 5.0).floor() as i32,
                    ((lat + 90.0) / 5.0).floor() as i32,
                ),
            });
        }
    }
    out
}

/// Largest remainder with ties to the earlier split, then at least one per
/// split (taken from the largest, earliest on ties).
pub fn apportion(n: usize, fr: [f64; 3]) -> [usize; 3] {
    let q: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut c = [0usize; 3];
    for i in 0..3 {
        c[i] = (q[i] + 1e-9).floor() as usize;
    }
    let mut left = n - c.iter().sum::<usize>();
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| {
        (q[b] - c[b] as f64)
            .partial_cmp(&(q[a] - c[a] as f64))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut k = 0;
    while left > 0 {
        c[idx[k % 3]] += 1;
        left -= 1;
        k += 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if c[i] == 0 {
                let mut big = 0;
                for j in 1..3 {
                    if c[j] > c[big] {
                        big = j;
                    }
                }
                c[big] -= 1;
                c[i] = 1;
            }
        }
    }
    c
}

/// Split label (0 train, 1 val, 2 test) per block.
pub fn block_splits(blocks: &[(i32, i32)], fr: [f64; 3], seed: u64) -> BTreeMap<(i32, i32), usize> {
    let mut uniq: Vec<(i32, i32)> = blocks.to_vec();
    uniq.sort();
    uniq.dedup();
    uniq.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let c = apportion(uniq.len(), fr);
    uniq.into_iter()
        .enumerate()
        .map(|(i, b)| {
            (
                b,
                if i < c[0] {
                    0
                } else if i < c[0] + c[1] {
                    1
                } else {
                    2
                },
            )
        })
        .collect()
}
