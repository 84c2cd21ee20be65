//! Losses and the alternating discriminator / generator optimization.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{
    Adam, AdamConfig, AutogradError, Graph, LinearDecaySchedule, Scalar, Tensor, Var,
};
use crate::model::{
    sample_patch_embeddings, CutModel, Discriminator, Mode, ModelConfig, ModelError, PatchSampleSet,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} loss at iteration {iteration}")]
    NonFiniteLoss { what: &'static str, iteration: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_nce: f64,
    pub tau: f64,
    pub num_negatives: usize,
}

impl LossWeights {
    pub fn cut() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_nce: 1.0,
            tau: 0.07,
            num_negatives: 255,
        }
    }

    pub fn fastcut() -> Self {
        Self {
            lambda_nce: 10.0,
            ..Self::cut()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.lambda_gan >= 0.0) || !(self.lambda_nce >= 0.0) {
            return Err(TrainError::Config(
                "tau must be positive and weights non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `0.5·mean((D(real) - 1)²) + 0.5·mean(D(fake)²)`.
pub fn lsgan_d_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Var {
    let r = g.add_scalar(d_real, -T::one());
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(d_fake);
    let f = g.mean(f);
    let s = g.add(r, f).expect("scalars");
    g.scale(s, T::of(0.5))
}

/// `0.5·mean((D(fake) - 1)²)`.
pub fn lsgan_g_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let f = g.add_scalar(d_fake, -T::one());
    let f = g.square(f);
    let f = g.mean(f);
    g.scale(f, T::of(0.5))
}

/// Both least-squares objectives for one real and one fake batch. The fake
/// batch should be detached when the result feeds a discriminator step.
pub fn lsgan_losses<T: Scalar>(
    g: &mut Graph<T>,
    d: &Discriminator<T>,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let dr = d.forward(g, real)?;
    let df = d.forward(g, fake)?;
    Ok((lsgan_d_loss(g, dr, df), lsgan_g_loss(g, df)))
}

/// Per-layer mean InfoNCE over queries, summed over layers.
pub fn patch_nce_loss<T: Scalar>(
    g: &mut Graph<T>,
    samples: &[PatchSampleSet],
    batch: usize,
    w: &LossWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in samples {
        let l = g.patch_nce(s.query, s.positive, batch, T::of(w.tau))?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| TrainError::Config("no NCE layers".into()))
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, gan: Var, nce: Var, w: &LossWeights) -> Var {
    let a = g.scale(gan, T::of(w.lambda_gan));
    let b = g.scale(nce, T::of(w.lambda_nce));
    g.add(a, b).expect("scalars")
}

pub fn total_loss_value(gan: f64, nce: f64, w: &LossWeights) -> f64 {
    w.lambda_gan * gan + w.lambda_nce * nce
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    Lsgan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub lr: f64,
    pub constant_epochs: usize,
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub num_patches: usize,
    pub weights: LossWeights,
    pub gan_mode: GanMode,
    pub flip_prob: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub bn_momentum: f64,
    /// Histogram bins of the validation metric.
    pub val_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            adam: AdamConfig::default(),
            lr: 2e-4,
            constant_epochs: 200,
            decay_epochs: 200,
            batch_size: 4,
            patch_size: 256,
            num_patches: 256,
            weights: LossWeights::cut(),
            gan_mode: GanMode::Lsgan,
            flip_prob: 0.5,
            seed: 42,
            checkpoint_every: 5,
            bn_momentum: 0.1,
            val_bins: 64,
        }
    }

    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            constant_epochs: 15,
            decay_epochs: 15,
            patch_size: 64,
            ..Self::paper()
        }
    }

    pub fn epochs(&self) -> usize {
        self.constant_epochs + self.decay_epochs
    }

    pub fn schedule(&self) -> LinearDecaySchedule {
        LinearDecaySchedule {
            lr: self.lr,
            constant_epochs: self.constant_epochs,
            decay_epochs: self.decay_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.num_patches < 2 || self.epochs() == 0 || self.val_bins == 0
        {
            return Err(TrainError::Config(
                "batch_size, num_patches, epochs and val_bins must be positive".into(),
            ));
        }
        if self.weights.num_negatives + 1 != self.num_patches {
            return Err(TrainError::Config(format!(
                "num_negatives {} must equal num_patches - 1 ({})",
                self.weights.num_negatives,
                self.num_patches - 1
            )));
        }
        let div = 1 << self.model.generator.n_downsample;
        if !self.patch_size.is_multiple_of(div) {
            return Err(TrainError::Config(format!(
                "patch size {} not divisible by {div}",
                self.patch_size
            )));
        }
        if self
            .model
            .discriminator
            .output_size(self.patch_size)
            .is_none()
        {
            return Err(TrainError::Config(
                "patch too small for the discriminator".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(TrainError::Config(
                "flip_prob and bn_momentum must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Unpaired training pools of normalized patches (values in [-1, 1]).
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub size: usize,
    pub source: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
    pub val_source: Vec<Vec<f32>>,
    pub val_target: Vec<Vec<f32>>,
}

/// 8-bit code to network input range.
pub fn code_to_unit(code: f32) -> f32 {
    code / 127.5 - 1.0
}

/// Network output to a continuous 8-bit code.
pub fn unit_to_code(v: f32) -> f32 {
    ((v + 1.0) * 127.5).clamp(0.0, 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub epoch: usize,
    pub loss_gan_g: f32,
    pub loss_gan_d: f32,
    pub loss_nce: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub epoch: usize,
    pub val_hist_l1: f32,
}

pub const LOSS_CSV: &str = "losses.csv";
pub const VAL_CSV: &str = "validation.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Normalized histogram of codes in `bins` equal bins over [0, 255].
pub fn code_histogram(codes: impl Iterator<Item = f32>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut n = 0.0;
    for c in codes {
        let b = ((c.clamp(0.0, 255.0) as f64 / 256.0) * bins as f64) as usize;
        h[b.min(bins - 1)] += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

fn stack(items: &[&Vec<f32>], size: usize, flips: &[bool]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(items.len() * size * size);
    for (it, &flip) in items.iter().zip(flips) {
        if flip {
            for row in it.chunks(size) {
                data.extend(row.iter().rev());
            }
        } else {
            data.extend_from_slice(it);
        }
    }
    Tensor::new(&[items.len(), 1, size, size], data).expect("patch sizes checked")
}

/// Translate normalized patches in eval mode, `batch` at a time.
pub fn translate_batches<T: Scalar>(
    model: &CutModel<T>,
    patches: &[Vec<f32>],
    size: usize,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch.max(1)) {
        let refs: Vec<&Vec<f32>> = chunk.iter().collect();
        let x = stack(&refs, size, &vec![false; refs.len()]).cast::<T>();
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = model.generator.forward(&mut g, xv, Mode::Eval)?.image;
        for s in g.value(y).data().chunks(size * size) {
            out.push(s.iter().map(|v| v.f64() as f32).collect());
        }
    }
    Ok(out)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CutModel<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_h: Adam<f32>,
    /// Epochs completed.
    pub epoch: usize,
    pub iteration: u64,
    pub best_val: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub iterations: u64,
    pub best_val_hist_l1: Option<f32>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CutModel::new(&config.model, config.seed)?;
        let opt_g = Adam::new(config.adam, &model.generator.params);
        let opt_d = Adam::new(config.adam, &model.discriminator.params);
        let opt_h = Adam::new(config.adam, &model.heads.params);
        Ok(Self {
            config,
            model,
            opt_g,
            opt_d,
            opt_h,
            epoch: 0,
            iteration: 0,
            best_val: None,
        })
    }

    /// Model, optimizer moments and counters as named tensors.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut e = self.model.entries();
        e.extend(
            self.opt_g
                .state_tensors(&self.model.generator.params, "adam.G"),
        );
        e.extend(
            self.opt_d
                .state_tensors(&self.model.discriminator.params, "adam.D"),
        );
        e.extend(self.opt_h.state_tensors(&self.model.heads.params, "adam.H"));
        let steps = [
            self.opt_g.step_count(),
            self.opt_d.step_count(),
            self.opt_h.step_count(),
        ];
        // Counters are split into 16-bit halves so they survive f32 storage.
        let split = |v: u64| [(v >> 16) as f32, (v & 0xffff) as f32];
        let mut meta = Vec::new();
        for v in [
            self.epoch as u64,
            self.iteration,
            steps[0],
            steps[1],
            steps[2],
        ] {
            meta.extend(split(v));
        }
        meta.push(self.best_val.unwrap_or(-1.0));
        e.push((
            "state/meta".into(),
            Tensor::new(&[meta.len()], meta).expect("shape"),
        ));
        e
    }

    pub fn load_state(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        self.model.load_entries(entries)?;
        let (_, meta) = entries
            .iter()
            .find(|(n, _)| n == "state/meta")
            .ok_or_else(|| AutogradError::UnknownParam("state/meta".into()))?;
        let m = meta.data();
        if m.len() != 11 {
            return Err(TrainError::Data("malformed state/meta".into()));
        }
        let join = |i: usize| ((m[2 * i] as u64) << 16) | m[2 * i + 1] as u64;
        self.epoch = join(0) as usize;
        self.iteration = join(1);
        self.opt_g
            .load_state(&self.model.generator.params, "adam.G", entries, join(2))?;
        self.opt_d
            .load_state(&self.model.discriminator.params, "adam.D", entries, join(3))?;
        self.opt_h
            .load_state(&self.model.heads.params, "adam.H", entries, join(4))?;
        self.best_val = (m[10] >= 0.0).then_some(m[10]);
        Ok(())
    }

    /// One discriminator step followed by one generator/heads step.
    /// Returns (loss_gan_g, loss_gan_d, loss_nce).
    pub fn step(
        &mut self,
        x: Tensor<f32>,
        y: Tensor<f32>,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f32, f32, f32)> {
        let batch = x.shape()[0];
        let it = self.iteration + 1;
        let w = self.config.weights;
        let mut g = Graph::<f32>::new();
        g.freeze("D");
        let xv = g.input(x);
        let out = self.model.generator.forward(&mut g, xv, Mode::Train)?;
        let fake = out.image;

        let mut gd = Graph::<f32>::new();
        let real_d = gd.input(y);
        let fake_d = gd.input(g.value(fake).clone());
        let (loss_d, _) = lsgan_losses(&mut gd, &self.model.discriminator, real_d, fake_d)?;
        let loss_d_val = gd.value(loss_d).item();
        if !loss_d_val.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                what: "discriminator",
                iteration: it,
            });
        }
        gd.backward(loss_d)?;
        let grads_d = gd.param_grads(&self.model.discriminator.params);
        self.opt_d
            .step(&mut self.model.discriminator.params, &grads_d, lr)?;
        drop(gd);

        let d_fake = self.model.discriminator.forward(&mut g, fake)?;
        let loss_g = lsgan_g_loss(&mut g, d_fake);
        let feats_q = self.model.generator.encode(&mut g, fake, Mode::Train)?;
        let layer_ids = self.model.config.generator.nce_layer_ids.clone();
        let samples = sample_patch_embeddings(
            &mut g,
            &self.model.heads,
            &layer_ids,
            &out.features,
            &feats_q,
            self.config.num_patches,
            rng,
        )?;
        let nce = patch_nce_loss(&mut g, &samples, batch, &w)?;
        let total = total_loss(&mut g, loss_g, nce, &w);
        let (lg, ln) = (g.value(loss_g).item(), g.value(nce).item());
        if !(lg.is_finite() && ln.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                what: "generator",
                iteration: it,
            });
        }
        g.backward(total)?;
        let grads_g = g.param_grads(&self.model.generator.params);
        let grads_h = g.param_grads(&self.model.heads.params);
        self.opt_g
            .step(&mut self.model.generator.params, &grads_g, lr)?;
        self.opt_h
            .step(&mut self.model.heads.params, &grads_h, lr)?;
        self.model
            .generator
            .update_running(&out.norm_updates, self.config.bn_momentum);
        self.iteration = it;
        Ok((lg, loss_d_val, ln))
    }

    /// Mean absolute difference between the histograms of translated
    /// validation sources and validation targets.
    pub fn validation_metric(&self, data: &TrainData) -> Result<Option<f32>> {
        if data.val_source.is_empty() || data.val_target.is_empty() {
            return Ok(None);
        }
        let bins = self.config.val_bins;
        let fake = translate_batches(&self.model, &data.val_source, data.size, 8)?;
        let hf = code_histogram(fake.iter().flatten().map(|&v| unit_to_code(v)), bins);
        let hr = code_histogram(
            data.val_target.iter().flatten().map(|&v| unit_to_code(v)),
            bins,
        );
        let l1 = hf.iter().zip(&hr).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64;
        Ok(Some(l1 as f32))
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        let n = data.size * data.size;
        if data.size != self.config.patch_size {
            return Err(TrainError::Data(format!(
                "patch size {} but config expects {}",
                data.size, self.config.patch_size
            )));
        }
        if data.source.is_empty() || data.target.is_empty() {
            return Err(TrainError::Data(
                "both domains need training patches".into(),
            ));
        }
        let all = data
            .source
            .iter()
            .chain(&data.target)
            .chain(&data.val_source)
            .chain(&data.val_target);
        if all.clone().any(|p| p.len() != n) {
            return Err(TrainError::Data("ragged patch".into()));
        }
        Ok(())
    }

    /// Run one epoch; returns its loss rows.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<Vec<LossRow>> {
        self.check_data(data)?;
        let epoch = self.epoch + 1;
        let lr = self.config.schedule().lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, 1, epoch as u64));
        let mut order_a: Vec<usize> = (0..data.source.len()).collect();
        let mut order_b: Vec<usize> = (0..data.target.len()).collect();
        order_a.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        let n_iter = order_a.len().div_ceil(self.config.batch_size);
        let mut rows = Vec::with_capacity(n_iter);
        let size = data.size;
        for i in 0..n_iter {
            let ia = &order_a
                [i * self.config.batch_size..((i + 1) * self.config.batch_size).min(order_a.len())];
            let ib: Vec<usize> = (0..ia.len())
                .map(|k| order_b[(i * self.config.batch_size + k) % order_b.len()])
                .collect();
            let fa: Vec<bool> = ia
                .iter()
                .map(|_| rng.gen_bool(self.config.flip_prob))
                .collect();
            let fb: Vec<bool> = ib
                .iter()
                .map(|_| rng.gen_bool(self.config.flip_prob))
                .collect();
            let x = stack(
                &ia.iter().map(|&k| &data.source[k]).collect::<Vec<_>>(),
                size,
                &fa,
            );
            let y = stack(
                &ib.iter().map(|&k| &data.target[k]).collect::<Vec<_>>(),
                size,
                &fb,
            );
            let mut step_rng =
                ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, 2, self.iteration + 1));
            let (lg, ld, ln) = self.step(x, y, lr, &mut step_rng)?;
            rows.push(LossRow {
                iteration: self.iteration,
                epoch,
                loss_gan_g: lg,
                loss_gan_d: ld,
                loss_nce: ln,
                lr: lr as f32,
            });
        }
        self.epoch = epoch;
        Ok(rows)
    }
}

const LOSS_HEADER: [&str; 6] = [
    "iteration",
    "epoch",
    "loss_gan_g",
    "loss_gan_d",
    "loss_nce",
    "lr",
];
const VAL_HEADER: [&str; 2] = ["epoch", "val_hist_l1"];

/// Append rows, or rewrite the file (header first) when `append` is false.
fn write_rows<S: Serialize>(path: &Path, header: &[&str], rows: &[S], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    if fresh {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<S>, _>>()?)
}

pub fn periodic_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Train end to end, writing `losses.csv`, `validation.csv`, periodic
/// checkpoints, `best.ckpt` and `last.ckpt` into `out_dir`. With `resume`,
/// continue from `last.ckpt` when it exists.
pub fn train(
    config: TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    let start = std::time::Instant::now();
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(config)?;
    let last = out_dir.join(LAST_CKPT);
    let loss_path = out_dir.join(LOSS_CSV);
    let val_path = out_dir.join(VAL_CSV);
    let mut best_epoch = None;
    if resume && last.exists() {
        trainer.load_state(&checkpoint::read::<f32>(&last)?)?;
        let done = trainer.epoch;
        let losses: Vec<LossRow> = read_rows::<LossRow>(&loss_path)?
            .into_iter()
            .filter(|r| r.epoch <= done)
            .collect();
        write_rows(&loss_path, &LOSS_HEADER, &losses, false)?;
        let vals: Vec<ValRow> = read_rows::<ValRow>(&val_path)?
            .into_iter()
            .filter(|r| r.epoch <= done)
            .collect();
        best_epoch = vals
            .iter()
            .filter(|r| Some(r.val_hist_l1) == trainer.best_val)
            .map(|r| r.epoch)
            .next();
        write_rows(&val_path, &VAL_HEADER, &vals, false)?;
        log::info!("resuming after epoch {done}");
    } else {
        write_rows::<LossRow>(&loss_path, &LOSS_HEADER, &[], false)?;
        write_rows::<ValRow>(&val_path, &VAL_HEADER, &[], false)?;
    }
    trainer.check_data(data)?;
    while trainer.epoch < trainer.config.epochs() {
        let rows = trainer.run_epoch(data)?;
        write_rows(&loss_path, &LOSS_HEADER, &rows, true)?;
        let epoch = trainer.epoch;
        let mean_nce =
            rows.iter().map(|r| r.loss_nce as f64).sum::<f64>() / rows.len().max(1) as f64;
        if let Some(v) = trainer.validation_metric(data)? {
            write_rows(
                &val_path,
                &VAL_HEADER,
                &[ValRow {
                    epoch,
                    val_hist_l1: v,
                }],
                true,
            )?;
            if trainer.best_val.is_none_or(|b| v < b) {
                trainer.best_val = Some(v);
                best_epoch = Some(epoch);
                checkpoint::write(out_dir.join(BEST_CKPT), &trainer.model.entries())?;
            }
        }
        log::info!(
            "epoch {epoch}/{} mean nce {mean_nce:.4} best val {:?}",
            trainer.config.epochs(),
            trainer.best_val
        );
        let state = trainer.state_entries();
        if epoch % trainer.config.checkpoint_every.max(1) == 0 {
            checkpoint::write(out_dir.join(periodic_checkpoint_name(epoch)), &state)?;
        }
        checkpoint::write(&last, &state)?;
    }
    if !out_dir.join(BEST_CKPT).exists() {
        checkpoint::write(out_dir.join(BEST_CKPT), &trainer.model.entries())?;
    }
    Ok(TrainSummary {
        epochs: trainer.epoch,
        iterations: trainer.iteration,
        best_val_hist_l1: trainer.best_val,
        best_epoch,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Load model weights from a checkpoint written by [`train`].
pub fn load_model(config: &ModelConfig, path: &Path) -> Result<CutModel<f32>> {
    let mut m = CutModel::new(config, 0)?;
    m.load_entries(&checkpoint::read::<f32>(path)?)?;
    Ok(m)
}
