//! On-disk stages: synth → preprocess → train → eval → infer → report.
//!
//! Every stage writes `STAGE.json` (stage name and format version) and
//! `resolved_config.json` into its output directory. A stage refuses inputs
//! whose `STAGE.json` names a different producer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::checkpoint::CheckpointError;
use crate::eval::{self, MetricError, MetricsReport, DEFAULT_BIN_EDGES};
use crate::model::{CutModel, ModelConfig, ModelError};
use crate::preprocess::{
    self, calibration_from_values, extract_patches, radiometric_filter, spatial_filter, Domain,
    FilterThresholds, GeoBlock, Patch, PreprocessError, Split,
};
use crate::raster::io::{geotiff, grid, IoError, SampleFormat};
use crate::raster::{Origin, RadiometricCalibration, Raster, RasterError};
use crate::synth::{degrade_to_dmsp_like, generate_viirs_like, SceneSetConfig, SynthError};
use crate::train::{
    self, code_to_unit, translate_batches, unit_to_code, TrainConfig, TrainData, TrainError,
    TrainSummary,
};

pub const STAGE_VERSION: u32 = 1;
pub const STAGE_FILE: &str = "STAGE.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SCENES_MANIFEST: &str = "scenes.jsonl";
pub const PATCH_MANIFEST: &str = "manifest.jsonl";
pub const DATASET_INFO: &str = "dataset.json";
pub const MODEL_CONFIG: &str = "model_config.json";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: expected output of stage `{expected}`, found {found}")]
    StageOrder {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("prediction and truth patch sets differ: {0}")]
    ManifestMismatch(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    RasterIo(#[from] IoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| {
                PipelineError::Manifest(format!("{}:{}: {e}", path.display(), i + 1))
            })?,
        );
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage: String,
    pub version: u32,
    pub inputs: BTreeMap<String, String>,
}

fn mark_stage<C: Serialize>(
    dir: &Path,
    stage: &str,
    inputs: &[(&str, &Path)],
    config: &C,
) -> Result<()> {
    let info = StageInfo {
        stage: stage.to_string(),
        version: STAGE_VERSION,
        inputs: inputs
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
    };
    write_json(&dir.join(RESOLVED_CONFIG), config)?;
    write_json(&dir.join(STAGE_FILE), &info)
}

/// Fail unless `dir` holds the output of `expected`.
pub fn require_stage(dir: &Path, expected: &str) -> Result<StageInfo> {
    let path = dir.join(STAGE_FILE);
    if !path.exists() {
        return Err(PipelineError::StageOrder {
            path,
            expected: expected.into(),
            found: "no STAGE.json".into(),
        });
    }
    let info: StageInfo = read_json(&path)?;
    if info.stage != expected || info.version != STAGE_VERSION {
        return Err(PipelineError::StageOrder {
            path,
            expected: expected.into(),
            found: format!("stage `{}` version {}", info.stage, info.version),
        });
    }
    Ok(info)
}

// ---------------------------------------------------------------- synth

/// One line of `scenes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: String,
    pub seed: u64,
    /// `viirs`, `dmsp` or `land`.
    pub domain: String,
    pub path: String,
}

/// Generate paired scenes as GeoTIFFs plus `scenes.jsonl`.
pub fn run_synth(cfg: &SceneSetConfig, out_dir: &Path) -> Result<Vec<SceneRecord>> {
    create_dir(out_dir)?;
    let specs = cfg.specs()?;
    let scenes: Vec<_> = specs
        .par_iter()
        .map(|spec| -> Result<_> {
            let scene = generate_viirs_like(spec)?;
            let dmsp = degrade_to_dmsp_like(&scene.viirs, cfg.degrade)?;
            Ok((spec.seed, scene, dmsp))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(scenes.len() * 3);
    for (i, (seed, scene, dmsp)) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}");
        for (domain, r) in [
            ("viirs", &scene.viirs),
            ("dmsp", dmsp),
            ("land", &scene.land),
        ] {
            let file = format!("{name}_{domain}.tif");
            let fmt = if domain == "land" {
                SampleFormat::U8
            } else {
                SampleFormat::F32
            };
            geotiff::write(out_dir.join(&file), r, fmt)?;
            records.push(SceneRecord {
                scene: name.clone(),
                seed: *seed,
                domain: domain.into(),
                path: file,
            });
        }
    }
    write_jsonl(&out_dir.join(SCENES_MANIFEST), &records)?;
    mark_stage(out_dir, "synth", &[], cfg)?;
    Ok(records)
}

// ----------------------------------------------------------- preprocess

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub patch_size: usize,
    pub thresholds: FilterThresholds,
    pub fractions: [f64; 3],
    pub seed: u64,
    /// Mask used for scenes that have no `land` entry in the manifest.
    pub land_mask: Option<PathBuf>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            thresholds: FilterThresholds::default(),
            fractions: [0.70, 0.15, 0.15],
            seed: 42,
            land_mask: None,
        }
    }
}

/// One line of the dataset `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub scene: String,
    pub source_domain: Domain,
    pub tile_xy: (usize, usize),
    pub center: (f64, f64),
    pub geo_block: GeoBlock,
    pub split: Split,
    pub land_fraction: f64,
    pub mean_log1p: f64,
    pub std_log1p: f64,
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessCounts {
    pub scenes: usize,
    pub extracted: usize,
    pub after_spatial: usize,
    pub after_radiometric: usize,
    pub pairs: BTreeMap<String, usize>,
    pub blocks: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub patch_size: usize,
    pub raw_dir: String,
    pub dmsp_calibration: RadiometricCalibration,
    pub viirs_calibration: RadiometricCalibration,
    pub counts: PreprocessCounts,
    /// Raw raster file of each scene and domain, relative to `raw_dir`.
    pub scene_files: BTreeMap<String, BTreeMap<String, String>>,
    pub pixel_size: BTreeMap<String, f64>,
}

struct PairPatch {
    scene: String,
    dmsp: Patch,
    viirs: Patch,
}

/// Cut the part of a larger mask that lines up with `scene`, if the pixel
/// sizes agree and the mask covers it.
fn mask_window(mask: &Raster, scene: &Raster) -> Option<Raster> {
    let px = scene.pixel_size();
    if (mask.pixel_size() - px).abs() > 1e-9 * px {
        return None;
    }
    let (m, o) = (mask.origin(), scene.origin());
    let col = (o.lon - m.lon) / px;
    let row = (m.lat - o.lat) / px;
    if col < -1e-6
        || row < -1e-6
        || (col - col.round()).abs() > 1e-6
        || (row - row.round()).abs() > 1e-6
    {
        return None;
    }
    let (col, row) = (col.round() as usize, row.round() as usize);
    if col + scene.width() > mask.width() || row + scene.height() > mask.height() {
        return None;
    }
    mask.window(col, row, scene.width(), scene.height()).ok()
}

fn group_scenes(records: &[SceneRecord]) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut m: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for r in records {
        m.entry(r.scene.clone())
            .or_default()
            .insert(r.domain.clone(), r.path.clone());
    }
    m
}

fn read_raster(path: &Path) -> Result<Raster> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(format!(
            "raster {} does not exist",
            path.display()
        )));
    }
    Ok(geotiff::read(path)?.0)
}

/// Tile each scene in both domains, apply the spatial and radiometric
/// filters (a tile survives only when both domains pass), estimate the
/// calibration ranges over all surviving tiles and split by block.
fn build_pairs(
    cfg: &PreprocessConfig,
    raw_dir: &Path,
) -> Result<(Vec<PairPatch>, PreprocessCounts, DatasetInfo)> {
    cfg.thresholds.validate()?;
    let records: Vec<SceneRecord> = read_jsonl(&raw_dir.join(SCENES_MANIFEST))?;
    let scenes = group_scenes(&records);
    let fallback_mask = match &cfg.land_mask {
        Some(p) => Some(read_raster(p)?),
        None => None,
    };
    let mut counts = PreprocessCounts {
        scenes: scenes.len(),
        ..Default::default()
    };
    let mut pairs = Vec::new();
    let mut pixel_size = BTreeMap::new();
    for (name, files) in &scenes {
        let get = |d: &str| {
            files
                .get(d)
                .ok_or_else(|| PipelineError::Manifest(format!("scene {name} has no `{d}` raster")))
        };
        let viirs = read_raster(&raw_dir.join(get("viirs")?))?;
        let dmsp = read_raster(&raw_dir.join(get("dmsp")?))?;
        let land = match (files.get("land"), &fallback_mask) {
            (Some(p), _) => read_raster(&raw_dir.join(p))?,
            (None, Some(m)) => mask_window(m, &viirs).ok_or_else(|| {
                PipelineError::Manifest(format!(
                    "land mask does not cover scene {name} on its pixel grid"
                ))
            })?,
            (None, None) => {
                return Err(PipelineError::MissingInput(format!(
                    "scene {name} has no land mask; supply one with --land-mask"
                )))
            }
        };
        if !viirs.same_grid(&dmsp) {
            return Err(PipelineError::Manifest(format!(
                "scene {name}: DMSP and VIIRS grids differ"
            )));
        }
        pixel_size.insert(name.clone(), viirs.pixel_size());
        let pv = extract_patches(&viirs, cfg.patch_size, Domain::Viirs)?;
        let pd = extract_patches(&dmsp, cfg.patch_size, Domain::Dmsp)?;
        counts.extracted += pv.len();
        let sv = spatial_filter(pv, &viirs, &land, &cfg.thresholds)?;
        let sd = spatial_filter(pd, &dmsp, &land, &cfg.thresholds)?;
        counts.after_spatial += sv.len();
        let rv = radiometric_filter(sv, &cfg.thresholds);
        let rd = radiometric_filter(sd, &cfg.thresholds);
        let mut by_tile: BTreeMap<(usize, usize), Patch> =
            rd.into_iter().map(|p| (p.tile_xy, p)).collect();
        for v in rv {
            if let Some(d) = by_tile.remove(&v.tile_xy) {
                pairs.push(PairPatch {
                    scene: name.clone(),
                    dmsp: d,
                    viirs: v,
                });
            }
        }
    }
    counts.after_radiometric = pairs.len();
    if pairs.is_empty() {
        return Err(PipelineError::Manifest(
            "no patch pair survived filtering".into(),
        ));
    }
    let logs = |sel: fn(&PairPatch) -> &Patch| {
        let mut v: Vec<f64> = pairs
            .iter()
            .flat_map(|p| sel(p).data.iter().map(|&x| (x.max(0.0) as f64).ln_1p()))
            .collect();
        calibration_from_values(&mut v, cfg.thresholds.clip_quantile)
    };
    let dmsp_calibration = logs(|p| &p.dmsp)?;
    let viirs_calibration = logs(|p| &p.viirs)?;
    let mut viirs_patches: Vec<Patch> = pairs.iter().map(|p| p.viirs.clone()).collect();
    let blocks = preprocess::split_by_blocks(&mut viirs_patches, cfg.fractions, cfg.seed)?;
    for (pair, v) in pairs.iter_mut().zip(viirs_patches) {
        pair.dmsp.split = v.split;
        pair.viirs.split = v.split;
    }
    for s in Split::ALL {
        let key = split_name(s).to_string();
        counts.pairs.insert(
            key.clone(),
            pairs.iter().filter(|p| p.viirs.split == Some(s)).count(),
        );
        counts
            .blocks
            .insert(key, blocks.values().filter(|&&b| b == s).count());
    }
    let info = DatasetInfo {
        patch_size: cfg.patch_size,
        raw_dir: fs::canonicalize(raw_dir)
            .map_err(io_err(raw_dir))?
            .display()
            .to_string(),
        dmsp_calibration,
        viirs_calibration,
        counts: counts.clone(),
        scene_files: scenes,
        pixel_size,
    };
    Ok((pairs, counts, info))
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Build the patch dataset. With `dry_run`, only the counts are computed.
pub fn run_preprocess(
    cfg: &PreprocessConfig,
    raw_dir: &Path,
    out_dir: &Path,
    dry_run: bool,
) -> Result<PreprocessCounts> {
    require_stage(raw_dir, "synth").or_else(|e| {
        // Hand-assembled raw directories only need the scene manifest.
        if raw_dir.join(SCENES_MANIFEST).exists() && !raw_dir.join(STAGE_FILE).exists() {
            Ok(StageInfo {
                stage: "synth".into(),
                version: STAGE_VERSION,
                inputs: BTreeMap::new(),
            })
        } else {
            Err(e)
        }
    })?;
    let (pairs, counts, info) = build_pairs(cfg, raw_dir)?;
    if dry_run {
        return Ok(counts);
    }
    for d in ["dmsp", "viirs"] {
        create_dir(&out_dir.join("patches").join(d))?;
    }
    let mut records = Vec::with_capacity(2 * pairs.len());
    for pair in &pairs {
        for (p, cal) in [
            (&pair.dmsp, &info.dmsp_calibration),
            (&pair.viirs, &info.viirs_calibration),
        ] {
            let (tx, ty) = p.tile_xy;
            let id = format!("{}_{}_{tx}_{ty}", p.source_domain.name(), pair.scene);
            let rel = format!(
                "patches/{}/{}_{tx}_{ty}.grid",
                p.source_domain.name(),
                pair.scene
            );
            let codes: Vec<f32> = p
                .data
                .iter()
                .map(|&v| cal.quantize_value((v.max(0.0) as f64).ln_1p()) as f32)
                .collect();
            let half = p.size as f64 / 2.0;
            let ps = info.pixel_size[&pair.scene];
            let origin = Origin {
                lon: p.center.0 - half * ps,
                lat: p.center.1 + half * ps,
            };
            let r = Raster::new(p.size, p.size, ps, origin, codes, None)?;
            grid::write(out_dir.join(&rel), &r, SampleFormat::U8)?;
            records.push(PatchRecord {
                id,
                scene: pair.scene.clone(),
                source_domain: p.source_domain,
                tile_xy: p.tile_xy,
                center: p.center,
                geo_block: p.geo_block,
                split: p.split.expect("split assigned"),
                land_fraction: p.land_fraction.expect("annotated by the spatial filter"),
                mean_log1p: p.mean_log1p,
                std_log1p: p.std_log1p,
                path: rel,
            });
        }
    }
    write_jsonl(&out_dir.join(PATCH_MANIFEST), &records)?;
    write_json(&out_dir.join(DATASET_INFO), &info)?;
    mark_stage(out_dir, "preprocess", &[("raw", raw_dir)], cfg)?;
    Ok(counts)
}

/// A preprocessed dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<PatchRecord>,
}

/// Co-located DMSP and VIIRS records of one tile.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub dmsp: PatchRecord,
    pub viirs: PatchRecord,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        require_stage(dir, "preprocess")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            info: read_json(&dir.join(DATASET_INFO))?,
            records: read_jsonl(&dir.join(PATCH_MANIFEST))?,
        })
    }

    pub fn pairs(&self, split: Split) -> Result<Vec<PairRecord>> {
        let mut dmsp: BTreeMap<(String, (usize, usize)), PatchRecord> = BTreeMap::new();
        let mut viirs = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            match r.source_domain {
                Domain::Dmsp => {
                    dmsp.insert((r.scene.clone(), r.tile_xy), r.clone());
                }
                Domain::Viirs => viirs.push(r.clone()),
            }
        }
        let mut out = Vec::with_capacity(viirs.len());
        for v in viirs {
            let d = dmsp.remove(&(v.scene.clone(), v.tile_xy)).ok_or_else(|| {
                PipelineError::ManifestMismatch(format!(
                    "no DMSP patch for {} tile {:?}",
                    v.scene, v.tile_xy
                ))
            })?;
            out.push(PairRecord { dmsp: d, viirs: v });
        }
        if let Some(((s, t), _)) = dmsp.into_iter().next() {
            return Err(PipelineError::ManifestMismatch(format!(
                "no VIIRS patch for {s} tile {t:?}"
            )));
        }
        Ok(out)
    }

    /// 8-bit codes of one patch.
    pub fn codes(&self, r: &PatchRecord) -> Result<Vec<u8>> {
        let (raster, _) = grid::read(self.dir.join(&r.path))?;
        if raster.width() != self.info.patch_size || raster.height() != self.info.patch_size {
            return Err(PipelineError::Manifest(format!(
                "{}: wrong patch size",
                r.path
            )));
        }
        Ok(raster.values().iter().map(|&v| v as u8).collect())
    }

    /// Raw-raster window of a patch (radiance for VIIRS, DN for DMSP).
    pub fn raw_window(
        &self,
        r: &PatchRecord,
        cache: &mut BTreeMap<(String, Domain), Raster>,
    ) -> Result<Vec<f64>> {
        let key = (r.scene.clone(), r.source_domain);
        if !cache.contains_key(&key) {
            let rel = self
                .info
                .scene_files
                .get(&r.scene)
                .and_then(|f| f.get(r.source_domain.name()))
                .ok_or_else(|| {
                    PipelineError::Manifest(format!(
                        "no raw {} raster for {}",
                        r.source_domain.name(),
                        r.scene
                    ))
                })?;
            let raster = read_raster(&Path::new(&self.info.raw_dir).join(rel))?;
            cache.insert(key.clone(), raster);
        }
        let raster = &cache[&key];
        let s = self.info.patch_size;
        let w = raster.window(r.tile_xy.0 * s, r.tile_xy.1 * s, s, s)?;
        Ok(w.values().iter().map(|&v| v.max(0.0) as f64).collect())
    }
}

fn to_unit(codes: &[u8]) -> Vec<f32> {
    codes.iter().map(|&c| code_to_unit(c as f32)).collect()
}

/// Unpaired training pools from the train and val splits.
pub fn load_train_data(ds: &Dataset) -> Result<TrainData> {
    let mut data = TrainData {
        size: ds.info.patch_size,
        ..Default::default()
    };
    for p in ds.pairs(Split::Train)? {
        data.source.push(to_unit(&ds.codes(&p.dmsp)?));
        data.target.push(to_unit(&ds.codes(&p.viirs)?));
    }
    for p in ds.pairs(Split::Val)? {
        data.val_source.push(to_unit(&ds.codes(&p.dmsp)?));
        data.val_target.push(to_unit(&ds.codes(&p.viirs)?));
    }
    Ok(data)
}

// ---------------------------------------------------------------- train

pub fn run_train(
    cfg: &TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    let ds = Dataset::load(dataset_dir)?;
    if ds.info.patch_size != cfg.patch_size {
        return Err(PipelineError::Manifest(format!(
            "dataset patch size {} but training config expects {}",
            ds.info.patch_size, cfg.patch_size
        )));
    }
    let data = load_train_data(&ds)?;
    log::info!(
        "training on {} source / {} target patches",
        data.source.len(),
        data.target.len()
    );
    create_dir(out_dir)?;
    write_json(&out_dir.join(MODEL_CONFIG), &cfg.model)?;
    let summary = train::train(cfg.clone(), &data, out_dir, resume)?;
    write_json(&out_dir.join(TRAIN_SUMMARY), &summary)?;
    mark_stage(out_dir, "train", &[("dataset", dataset_dir)], cfg)?;
    Ok(summary)
}

/// Model config and weights of a training run (`best.ckpt` unless
/// `checkpoint` names another file).
pub fn load_run_model(run_dir: &Path, checkpoint: Option<&Path>) -> Result<CutModel<f32>> {
    require_stage(run_dir, "train")?;
    let cfg: ModelConfig = read_json(&run_dir.join(MODEL_CONFIG))?;
    // Bare names like `last.ckpt` refer to files inside the run directory.
    let ckpt = match checkpoint {
        Some(p) if !p.exists() && run_dir.join(p).exists() => run_dir.join(p),
        Some(p) => p.to_path_buf(),
        None => run_dir.join(train::BEST_CKPT),
    };
    if !ckpt.exists() {
        return Err(PipelineError::MissingInput(format!(
            "checkpoint {} not found",
            ckpt.display()
        )));
    }
    Ok(train::load_model(&cfg, &ckpt)?)
}

// ----------------------------------------------------------------- eval

/// How test predictions are produced.
pub enum Predictor<'a> {
    Model(&'a CutModel<f32>),
    /// Returns the paired truth; checks the evaluation wiring.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Lower edges of the radiance strata; the last stratum is open-ended.
    pub bin_edges: Vec<f64>,
    pub scatter_bins: usize,
    /// Also evaluate a freshly initialized generator.
    pub include_untrained: bool,
    pub untrained_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_edges: DEFAULT_BIN_EDGES[..DEFAULT_BIN_EDGES.len() - 1].to_vec(),
            scatter_bins: 512,
            include_untrained: true,
            untrained_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test_patches: usize,
    pub ssim_data_range: f64,
    pub linear_fit: eval::LinearFit,
    pub methods: Vec<MetricsReport>,
    /// Upper end of both axes of `scatter.csv`, in log1p radiance.
    pub scatter_axis_max: f64,
    pub scatter_bins: usize,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MetricsReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Radiance predictions of a generator for DMSP code patches.
pub fn model_predictions(
    model: &CutModel<f32>,
    codes: &[Vec<u8>],
    size: usize,
    cal: &RadiometricCalibration,
) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<Vec<f32>> = codes.iter().map(|c| to_unit(c)).collect();
    let out = translate_batches(model, &inputs, size, 8)?;
    Ok(out
        .into_iter()
        .map(|p| {
            p.into_iter()
                .map(|v| {
                    cal.dequantize_value(unit_to_code(v) as f64)
                        .exp_m1()
                        .max(0.0)
                })
                .collect()
        })
        .collect())
}

/// Evaluate a predictor and both reference calibrations on the test split.
pub fn evaluate_run(
    ds: &Dataset,
    predictor: Predictor<'_>,
    model_cfg: Option<&ModelConfig>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let test = ds.pairs(Split::Test)?;
    if test.is_empty() {
        return Err(PipelineError::Manifest("test split is empty".into()));
    }
    let size = ds.info.patch_size;
    let mut cache = BTreeMap::new();
    let mut truth = Vec::with_capacity(test.len());
    let mut dmsp_raw = Vec::with_capacity(test.len());
    let mut dmsp_codes = Vec::with_capacity(test.len());
    for p in &test {
        truth.push(ds.raw_window(&p.viirs, &mut cache)?);
        dmsp_raw.push(ds.raw_window(&p.dmsp, &mut cache)?);
        dmsp_codes.push(ds.codes(&p.dmsp)?);
    }
    let (mut fx, mut fy, mut ref_codes) = (Vec::new(), Vec::new(), Vec::new());
    for p in ds.pairs(Split::Train)? {
        fx.extend(ds.raw_window(&p.dmsp, &mut cache)?);
        fy.extend(ds.raw_window(&p.viirs, &mut cache)?);
        ref_codes.extend(ds.codes(&p.viirs)?);
    }
    let lo = truth
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = truth
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let data_range = (hi - lo).max(1e-9);
    let mut edges = cfg.bin_edges.clone();
    edges.push(f64::INFINITY);
    let edges = &edges;
    let vcal = ds.info.viirs_calibration;
    let mut methods = Vec::new();
    let primary = match predictor {
        Predictor::Model(m) => ("cut", model_predictions(m, &dmsp_codes, size, &vcal)?),
        Predictor::Identity => ("identity", truth.clone()),
    };
    if primary.1.len() != truth.len()
        || primary
            .1
            .iter()
            .zip(&truth)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(PipelineError::ManifestMismatch(
            "prediction shapes differ from truth".into(),
        ));
    }
    methods.push(eval::metrics_report(
        primary.0, &primary.1, &truth, size, edges, data_range,
    )?);
    if cfg.include_untrained {
        if let Some(mc) = model_cfg {
            let fresh = CutModel::<f32>::new(mc, cfg.untrained_seed)?;
            let pred = model_predictions(&fresh, &dmsp_codes, size, &vcal)?;
            methods.push(eval::metrics_report(
                "untrained",
                &pred,
                &truth,
                size,
                edges,
                data_range,
            )?);
        }
    }
    let fit = eval::baseline_linear(&fx, &fy)?;
    let lin: Vec<Vec<f64>> = dmsp_raw
        .iter()
        .map(|p| p.iter().map(|&x| eval::apply_linear(&fit, x)).collect())
        .collect();
    methods.push(eval::metrics_report(
        "linear_regression",
        &lin,
        &truth,
        size,
        edges,
        data_range,
    )?);
    let all_codes: Vec<u8> = dmsp_codes.iter().flatten().copied().collect();
    let hm = eval::HistogramMatch::fit(&all_codes, &ref_codes)?;
    let hist: Vec<Vec<f64>> = dmsp_codes
        .iter()
        .map(|p| {
            p.iter()
                .map(|&c| vcal.dequantize_value(hm.apply(c) as f64).exp_m1().max(0.0))
                .collect()
        })
        .collect();
    methods.push(eval::metrics_report(
        "histogram_matching",
        &hist,
        &truth,
        size,
        edges,
        data_range,
    )?);
    let p: Vec<f64> = primary.1.iter().flatten().copied().collect();
    let t: Vec<f64> = truth.iter().flatten().copied().collect();
    let (_, scatter_axis_max) = eval::density_grid(&p, &t, cfg.scatter_bins.max(1));
    Ok(EvalReport {
        n_test_patches: test.len(),
        ssim_data_range: data_range,
        linear_fit: fit,
        methods,
        scatter_axis_max,
        scatter_bins: cfg.scatter_bins,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn write_eval_tables(report: &EvalReport, out_dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out_dir.join("comparison.csv"))?;
    w.write_record([
        "method",
        "pearson_r",
        "spearman_rho",
        "r_squared",
        "ccc",
        "mae",
        "rmse",
        "ssim_mean",
        "ssim_std",
    ])?;
    for m in &report.methods {
        w.write_record([
            m.method.clone(),
            fmt_opt(m.pearson_r),
            fmt_opt(m.spearman_rho),
            fmt_opt(m.r_squared),
            fmt_opt(m.ccc),
            fmt_opt(m.mae),
            fmt_opt(m.rmse),
            fmt_opt(m.ssim_mean),
            fmt_opt(m.ssim_std),
        ])?;
    }
    w.flush().map_err(io_err(out_dir))?;
    let mut w = csv::Writer::from_path(out_dir.join("stratified.csv"))?;
    w.write_record(["method", "range", "pixel_count", "mae", "rmse", "r_squared"])?;
    for m in &report.methods {
        let last = m.stratified.len() - 1;
        for (i, s) in m.stratified.iter().enumerate() {
            let range = if i == last {
                "overall".to_string()
            } else {
                match s.upper {
                    Some(u) => format!("{}-{}", s.lower, u),
                    None => format!(">{}", s.lower),
                }
            };
            w.write_record([
                m.method.clone(),
                range,
                s.pixel_count.to_string(),
                fmt_opt(s.mae),
                fmt_opt(s.rmse),
                fmt_opt(s.r_squared),
            ])?;
        }
    }
    w.flush().map_err(io_err(out_dir))?;
    Ok(())
}

/// Evaluate a run (or the identity oracle when `run_dir` is `None`) and
/// write `report.json`, `comparison.csv`, `stratified.csv` and
/// `scatter.csv` into `out_dir`.
pub fn run_eval(
    dataset_dir: &Path,
    run_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    let ds = Dataset::load(dataset_dir)?;
    create_dir(out_dir)?;
    let (report, scatter) = match run_dir {
        Some(dir) => {
            let model = load_run_model(dir, checkpoint)?;
            let report = evaluate_run(&ds, Predictor::Model(&model), Some(&model.config), cfg)?;
            let scatter = scatter_for(&ds, Some(&model))?;
            (report, scatter)
        }
        None => (
            evaluate_run(&ds, Predictor::Identity, None, cfg)?,
            scatter_for(&ds, None)?,
        ),
    };
    let (grid_vals, _) = eval::density_grid(&scatter.0, &scatter.1, cfg.scatter_bins.max(1));
    let mut text = String::new();
    for row in grid_vals.chunks(cfg.scatter_bins.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_bytes(&out_dir.join("scatter.csv"), text.as_bytes())?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    write_eval_tables(&report, out_dir)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", dataset_dir)];
    if let Some(d) = run_dir {
        inputs.push(("run", d));
    }
    mark_stage(out_dir, "eval", &inputs, cfg)?;
    Ok(report)
}

fn scatter_for(ds: &Dataset, model: Option<&CutModel<f32>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cache = BTreeMap::new();
    let test = ds.pairs(Split::Test)?;
    let mut truth = Vec::new();
    let mut codes = Vec::new();
    for p in &test {
        truth.push(ds.raw_window(&p.viirs, &mut cache)?);
        codes.push(ds.codes(&p.dmsp)?);
    }
    let pred = match model {
        Some(m) => model_predictions(m, &codes, ds.info.patch_size, &ds.info.viirs_calibration)?,
        None => truth.clone(),
    };
    Ok((
        pred.into_iter().flatten().collect(),
        truth.into_iter().flatten().collect(),
    ))
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub patch_size: usize,
    /// Overlap in pixels between neighbouring tiles; 0 tiles without overlap.
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub width: usize,
    pub height: usize,
    pub padded: bool,
    pub tiles: usize,
}

/// Translate a full DMSP-like raster into calibrated radiance. The raster is
/// zero-padded up to whole tiles and the result cropped back.
pub fn infer_raster(
    model: &CutModel<f32>,
    dmsp: &Raster,
    dmsp_cal: &RadiometricCalibration,
    viirs_cal: &RadiometricCalibration,
    cfg: &InferConfig,
) -> Result<(Raster, InferSummary)> {
    let s = cfg.patch_size;
    let div = model.generator.size_multiple();
    if s == 0 || !s.is_multiple_of(div) || cfg.overlap >= s {
        return Err(PipelineError::Manifest(format!(
            "patch size {s} / overlap {} unusable",
            cfg.overlap
        )));
    }
    let stride = s - cfg.overlap;
    let (w, h) = (dmsp.width(), dmsp.height());
    let tiles_along = |n: usize| {
        if n <= s {
            1
        } else {
            (n - s).div_ceil(stride) + 1
        }
    };
    let (nx, ny) = (tiles_along(w), tiles_along(h));
    let (pw, ph) = ((nx - 1) * stride + s, (ny - 1) * stride + s);
    let padded = pw != w || ph != h;
    if padded {
        log::warn!("raster {w}x{h} padded with zeros to {pw}x{ph} for tiling");
    }
    let mut codes = vec![0u8; pw * ph];
    for y in 0..h {
        for x in 0..w {
            let v = dmsp.get(x, y);
            let v = if dmsp.is_nodata(v) { 0.0 } else { v.max(0.0) };
            codes[y * pw + x] = dmsp_cal.quantize_value((v as f64).ln_1p());
        }
    }
    let weight_1d = |i: usize| -> f64 {
        if cfg.overlap == 0 {
            return 1.0;
        }
        let d = i.min(s - 1 - i) as f64 + 1.0;
        d.min(cfg.overlap as f64 + 1.0)
    };
    let mut tiles = Vec::with_capacity(nx * ny);
    let mut origins = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            let (x0, y0) = (tx * stride, ty * stride);
            let mut t = Vec::with_capacity(s * s);
            for y in 0..s {
                t.extend_from_slice(&codes[(y0 + y) * pw + x0..(y0 + y) * pw + x0 + s]);
            }
            tiles.push(t);
            origins.push((x0, y0));
        }
    }
    let preds = model_predictions(model, &tiles, s, viirs_cal)?;
    let mut acc = vec![0.0f64; pw * ph];
    let mut wsum = vec![0.0f64; pw * ph];
    for (p, &(x0, y0)) in preds.iter().zip(&origins) {
        for y in 0..s {
            for x in 0..s {
                let wgt = weight_1d(x) * weight_1d(y);
                let i = (y0 + y) * pw + x0 + x;
                acc[i] += wgt * p[y * s + x];
                wsum[i] += wgt;
            }
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            out.push((acc[i] / wsum[i]) as f32);
        }
    }
    let raster = Raster::new(w, h, dmsp.pixel_size(), dmsp.origin(), out, None)?;
    Ok((
        raster,
        InferSummary {
            width: w,
            height: h,
            padded,
            tiles: nx * ny,
        },
    ))
}

/// Run [`infer_raster`] on a GeoTIFF and write `<stem>_calibrated.tif` and
/// `<stem>_calibrated.grid` into `out_dir`.
pub fn run_infer(
    run_dir: &Path,
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    input: &Path,
    overlap: usize,
    out_dir: &Path,
) -> Result<InferSummary> {
    let model = load_run_model(run_dir, checkpoint)?;
    let ds = Dataset::load(dataset_dir)?;
    let dmsp = read_raster(input)?;
    let cfg = InferConfig {
        patch_size: ds.info.patch_size,
        overlap,
    };
    let (r, summary) = infer_raster(
        &model,
        &dmsp,
        &ds.info.dmsp_calibration,
        &ds.info.viirs_calibration,
        &cfg,
    )?;
    create_dir(out_dir)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("raster");
    geotiff::write(
        out_dir.join(format!("{stem}_calibrated.tif")),
        &r,
        SampleFormat::F32,
    )?;
    grid::write(
        out_dir.join(format!("{stem}_calibrated.grid")),
        &r,
        SampleFormat::F32,
    )?;
    write_json(&out_dir.join("infer_summary.json"), &summary)?;
    mark_stage(
        out_dir,
        "infer",
        &[("run", run_dir), ("dataset", dataset_dir), ("input", input)],
        &cfg,
    )?;
    Ok(summary)
}

// --------------------------------------------------------------- report

const SHADES: &[char] = &[' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];

fn ascii_scatter(grid_csv: &str, cells: usize) -> String {
    let rows: Vec<Vec<f64>> = grid_csv
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect())
        .collect();
    let n = rows.len();
    if n == 0 {
        return String::new();
    }
    let step = n.div_ceil(cells).max(1);
    let m = n.div_ceil(step);
    let mut coarse = vec![0.0f64; m * m];
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let c = &mut coarse[(i / step) * m + (j / step).min(m - 1)];
            *c = c.max(*v);
        }
    }
    let top = coarse.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut out = String::new();
    for r in coarse.chunks(m) {
        out.push('|');
        for &v in r {
            out.push(SHADES[((v / top) * (SHADES.len() - 1) as f64).round() as usize]);
        }
        out.push_str("|\n");
    }
    out
}

/// Render an evaluation directory (and optionally a training run) as
/// Markdown. Returns the document.
pub fn run_report(eval_dir: &Path, run_dir: Option<&Path>, out: &Path) -> Result<String> {
    require_stage(eval_dir, "eval")?;
    let report: EvalReport = read_json(&eval_dir.join(REPORT_JSON))?;
    let mut md = String::new();
    let _ = writeln!(md, "# Calibration report\n");
    let _ = writeln!(
        md,
        "Test patches: {}. SSIM data range: {:.3}.\n",
        report.n_test_patches, report.ssim_data_range
    );
    let _ = writeln!(md, "## Method comparison\n");
    let _ = writeln!(md, "| method | r | rho | R² | CCC | MAE | RMSE | SSIM |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    for m in &report.methods {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            m.method,
            f(m.pearson_r),
            f(m.spearman_rho),
            f(m.r_squared),
            f(m.ccc),
            f(m.mae),
            f(m.rmse),
            f(m.ssim_mean)
        );
    }
    if let Some(m) = report.methods.first() {
        let _ = writeln!(md, "\n## Errors by radiance level ({})\n", m.method);
        let _ = writeln!(md, "| range | pixels | MAE | RMSE | R² |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        let last = m.stratified.len() - 1;
        for (i, s) in m.stratified.iter().enumerate() {
            let range = if i == last {
                "overall".to_string()
            } else {
                s.upper
                    .map(|u| format!("{}–{}", s.lower, u))
                    .unwrap_or_else(|| format!("> {}", s.lower))
            };
            let _ = writeln!(
                md,
                "| {range} | {} | {} | {} | {} |",
                s.pixel_count,
                f(s.mae),
                f(s.rmse),
                f(s.r_squared)
            );
        }
    }
    let scatter_path = eval_dir.join("scatter.csv");
    if scatter_path.exists() {
        let text = fs::read_to_string(&scatter_path).map_err(io_err(&scatter_path))?;
        let _ = writeln!(
            md,
            "\n## Density scatter\n\nTruth on x, prediction on y, log1p radiance 0 to {:.2}.\n\n```\n{}```",
            report.scatter_axis_max,
            ascii_scatter(&text, 40)
        );
    }
    if let Some(dir) = run_dir {
        let rows: Vec<train::LossRow> = {
            let mut r = csv::Reader::from_path(dir.join(train::LOSS_CSV))?;
            r.deserialize().collect::<std::result::Result<_, _>>()?
        };
        let mut by_epoch: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
        for r in &rows {
            let e = by_epoch.entry(r.epoch).or_default();
            e.0 += r.loss_gan_g as f64;
            e.1 += r.loss_gan_d as f64;
            e.2 += r.loss_nce as f64;
            e.3 += 1;
        }
        let _ = writeln!(md, "\n## Loss curves (epoch means)\n");
        let _ = writeln!(md, "| epoch | G (LSGAN) | D (LSGAN) | PatchNCE |");
        let _ = writeln!(md, "|---|---|---|---|");
        for (e, (g, d, n, c)) in &by_epoch {
            let c = *c as f64;
            let _ = writeln!(md, "| {e} | {:.4} | {:.4} | {:.4} |", g / c, d / c, n / c);
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    let mut file = fs::File::create(out).map_err(io_err(out))?;
    file.write_all(md.as_bytes()).map_err(io_err(out))?;
    Ok(md)
}

// --------------------------------------------------------------- config

/// Settings of every stage. Loaded from JSON; missing sections keep their
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SceneSetConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }

    /// Apply `dotted.key=value` overrides. Values parse as JSON when they
    /// can and as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| {
                PipelineError::Manifest(format!("override `{o}` is not key=value"))
            })?;
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut root;
            for part in key.split('.') {
                node = node.get_mut(part).ok_or_else(|| {
                    PipelineError::Manifest(format!("override `{key}`: unknown key `{part}`"))
                })?;
            }
            *node = value;
        }
        Ok(serde_json::from_value(root)?)
    }

    /// Push the global seed into every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.preprocess.seed = seed;
        self.train.seed = seed;
        self.eval.untrained_seed = seed;
    }
}
