//! Runs the library's tiling, filters and block split on a reference
//! fixture and counts every disagreement with the reference.

use std::collections::{BTreeMap, BTreeSet};

use ntlcut::preprocess::{
    extract_patches, radiometric_filter, spatial_filter, split_by_blocks, Domain, FilterThresholds,
    GeoBlock, Split,
};
use ntlcut::raster::{Origin, Raster};

use super::reference::{self, Fixture, RefTile};

pub const SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

pub struct FixtureCheck {
    pub discrepancies: usize,
    pub tiles: Vec<RefTile>,
    pub splits: BTreeMap<(i32, i32), usize>,
}

pub fn rasters(f: &Fixture) -> (Raster, Raster) {
    let o = Origin {
        lon: f.lon0,
        lat: f.lat0,
    };
    (
        Raster::new(f.w, f.h, f.pixel, o, f.values.clone(), None).unwrap(),
        Raster::new(f.w, f.h, f.pixel, o, f.mask.clone(), None).unwrap(),
    )
}

pub fn compare(size: usize, tile: usize, seed: u64) -> FixtureCheck {
    let f = reference::fixture(size, tile, seed);
    let (r, mask) = rasters(&f);
    let t = FilterThresholds::default();
    let expected = reference::tiles(
        &f,
        tile,
        t.min_land_fraction,
        t.max_abs_latitude,
        t.tau_dark,
        t.tau_uniform,
    );
    let per_row = size / tile;

    let all = extract_patches(&r, tile, Domain::Viirs).unwrap();
    let mut discrepancies = all.len().abs_diff(expected.len());
    for (p, e) in all.iter().zip(&expected) {
        discrepancies += usize::from(p.tile_xy != (e.tx, e.ty));
        discrepancies +=
            usize::from((p.center.0 - e.lon).abs() > 1e-9 || (p.center.1 - e.lat).abs() > 1e-9);
        discrepancies +=
            usize::from((p.mean_log1p - e.mean).abs() > 1e-9 || (p.std_log1p - e.std).abs() > 1e-9);
        discrepancies += usize::from(
            p.geo_block
                != GeoBlock {
                    col: e.block.0,
                    row: e.block.1,
                },
        );
    }
    let spatial = spatial_filter(all, &r, &mask, &t).unwrap();
    let kept: BTreeSet<(usize, usize)> = spatial.iter().map(|p| p.tile_xy).collect();
    for e in &expected {
        discrepancies += usize::from(kept.contains(&(e.tx, e.ty)) != e.spatial_ok);
    }
    for p in &spatial {
        let e = &expected[p.tile_xy.1 * per_row + p.tile_xy.0];
        discrepancies += usize::from((p.land_fraction.unwrap() - e.land).abs() > 1e-12);
    }
    let mut radio = radiometric_filter(spatial, &t);
    let kept: BTreeSet<(usize, usize)> = radio.iter().map(|p| p.tile_xy).collect();
    for e in &expected {
        discrepancies +=
            usize::from(kept.contains(&(e.tx, e.ty)) != (e.spatial_ok && e.radiometric_ok));
    }
    split_by_blocks(&mut radio, SPLIT, 42).unwrap();
    let blocks: Vec<(i32, i32)> = expected
        .iter()
        .filter(|e| e.spatial_ok && e.radiometric_ok)
        .map(|e| e.block)
        .collect();
    let splits = reference::block_splits(&blocks, SPLIT, 42);
    for p in &radio {
        let want =
            [Split::Train, Split::Val, Split::Test][splits[&(p.geo_block.col, p.geo_block.row)]];
        discrepancies += usize::from(p.split != Some(want));
    }
    FixtureCheck {
        discrepancies,
        tiles: expected,
        splits,
    }
}
