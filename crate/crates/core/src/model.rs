//! CUT networks: ResNet generator with multilayer feature taps, PatchGAN
//! discriminator, per-layer MLP projection heads and patch sampling.
//!
//! Generator layer indices follow the CUT convention: 0 is the raw input,
//! 1/2/3 the 7×7 stem conv, norm and ReLU, then conv/norm/ReLU triples for
//! each downsampling stage, then one index per residual block. With two
//! downsampling stages the residual blocks start at index 10.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    AutogradError, Graph, NormKind, NormStats, PadMode, ParamId, ParamStore, Scalar, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input {h}x{w} is not divisible by {div}")]
    Shape { h: usize, w: usize, div: usize },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Transposed conv, kernel 3, stride 2.
    Transpose,
    /// Nearest-neighbour doubling followed by a 3×3 conv.
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub n_resblocks: usize,
    pub n_downsample: usize,
    pub padding: PadMode,
    pub norm: NormKind,
    pub upsample: Upsample,
    pub nce_layer_ids: Vec<usize>,
}

impl GeneratorConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_filters: 64,
            n_resblocks: 9,
            n_downsample: 2,
            padding: PadMode::Reflect,
            norm: NormKind::Batch,
            upsample: Upsample::Transpose,
            nce_layer_ids: vec![0, 4, 8, 12, 16],
        }
    }

    pub fn desk() -> Self {
        Self {
            base_filters: 16,
            n_resblocks: 4,
            nce_layer_ids: vec![0, 4, 8, 12],
            ..Self::paper()
        }
    }

    pub fn first_resblock(&self) -> usize {
        4 + 3 * self.n_downsample
    }

    /// Highest index that can carry an NCE feature (the last residual block).
    pub fn last_encoder_layer(&self) -> usize {
        self.first_resblock() + self.n_resblocks - 1
    }

    /// Channels and downsampling factor of the output of layer `id`.
    pub fn layer_geometry(&self, id: usize) -> (usize, usize) {
        if id == 0 {
            return (self.in_channels, 1);
        }
        if id <= 3 {
            return (self.base_filters, 1);
        }
        let stage = ((id - 4) / 3 + 1).min(self.n_downsample);
        (self.base_filters << stage, 1 << stage)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.n_resblocks == 0 {
            return bad("at least one residual block".into());
        }
        if self.nce_layer_ids.is_empty() {
            return bad("nce_layer_ids is empty".into());
        }
        let mut sorted = self.nce_layer_ids.clone();
        sorted.dedup();
        if sorted.len() != self.nce_layer_ids.len() || sorted.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "nce_layer_ids {:?} must be strictly increasing",
                self.nce_layer_ids
            ));
        }
        if let Some(&l) = self
            .nce_layer_ids
            .iter()
            .find(|&&l| l > self.last_encoder_layer())
        {
            return bad(format!(
                "nce layer {l} beyond encoder (last index {})",
                self.last_encoder_layer()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Stride-2 stages; filters double each stage.
    pub n_layers: usize,
    pub kernel: usize,
    pub padding: usize,
    pub leaky_slope: f64,
    pub norm: NormKind,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            base_filters: 64,
            n_layers: 3,
            kernel: 4,
            padding: 0,
            leaky_slope: 0.2,
            norm: NormKind::Batch,
        }
    }

    pub fn desk() -> Self {
        Self {
            base_filters: 16,
            padding: 1,
            ..Self::paper()
        }
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.n_layers];
        s.extend([1, 1]);
        s
    }

    /// Side of the input region seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.strides()
            .iter()
            .rev()
            .fold(1, |rf, &s| (rf - 1) * s + self.kernel)
    }

    /// Score-map side for an input side `n`, if positive.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.strides().iter().try_fold(n, |n, &s| {
            let padded = n + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / s + 1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 || self.n_layers == 0 || self.kernel == 0
        {
            return Err(ModelError::Config(
                "discriminator sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub embed_dim: usize,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            generator: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            embed_dim: 256,
            init_std: 0.02,
        }
    }

    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            embed_dim: 256,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.embed_dim == 0 || !(self.init_std >= 0.0) {
            return Err(ModelError::Config("embed_dim and init_std".into()));
        }
        Ok(())
    }
}

/// Train mode normalizes with batch statistics; eval mode uses the running
/// estimates (batch norm only; instance norm always uses its own statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    mode: PadMode,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Input,
    Conv(ConvP),
    ConvT(ConvP),
    UpConv(ConvP),
    Norm(NormP),
    Relu,
    Tanh,
    Res {
        c1: ConvP,
        n1: NormP,
        c2: ConvP,
        n2: NormP,
    },
}

/// Running mean and (biased) variance of one normalization layer, kept at
/// `f32` precision so checkpoints restore them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
    running: Vec<RunningStats>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> ConvP {
        let w = self.store.add_normal(
            format!("{name}.w"),
            &[cout, cin, k, k],
            0.0,
            self.std,
            self.rng,
        );
        let b = self.store.add_full(format!("{name}.b"), &[cout], 0.0);
        ConvP {
            w,
            b,
            stride,
            pad,
            mode,
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> ConvP {
        let w = self.store.add_normal(
            format!("{name}.w"),
            &[cin, cout, 3, 3],
            0.0,
            self.std,
            self.rng,
        );
        let b = self.store.add_full(format!("{name}.b"), &[cout], 0.0);
        ConvP {
            w,
            b,
            stride: 2,
            pad: 1,
            mode: PadMode::Zero,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        let gamma = self
            .store
            .add_normal(format!("{name}.gamma"), &[c], 1.0, self.std, self.rng);
        let beta = self.store.add_full(format!("{name}.beta"), &[c], 0.0);
        self.running.push(RunningStats {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        NormP {
            gamma,
            beta,
            slot: self.running.len() - 1,
        }
    }
}

/// Statistics a train-mode pass actually used, per norm slot.
pub type NormUpdates = Vec<(usize, Vec<f64>, Vec<f64>)>;

fn apply_conv<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    c: &ConvP,
) -> Result<Var> {
    let (w, b) = (g.param(store, c.w), g.param(store, c.b));
    Ok(g.conv2d(x, w, Some(b), c.stride, c.pad, c.mode)?)
}

fn apply_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    running: &[RunningStats],
    kind: NormKind,
    mode: Mode,
    x: Var,
    n: &NormP,
    updates: &mut NormUpdates,
) -> Result<Var> {
    let (gm, bt) = (g.param(store, n.gamma), g.param(store, n.beta));
    let rs = &running[n.slot];
    let stats = match (mode, kind) {
        (Mode::Eval, NormKind::Batch) => NormStats::Fixed {
            mean: &rs.mean,
            var: &rs.var,
        },
        _ => NormStats::Batch,
    };
    let (y, used) = g.norm(x, gm, bt, kind, stats)?;
    if let (Some((m, v)), NormKind::Batch) = (used, kind) {
        updates.push((n.slot, m, v));
    }
    Ok(y)
}

fn update_running(running: &mut [RunningStats], updates: &NormUpdates, momentum: f64) {
    for (slot, m, v) in updates {
        let rs = &mut running[*slot];
        for (r, x) in rs.mean.iter_mut().zip(m) {
            *r = ((1.0 - momentum) * *r + momentum * x) as f32 as f64;
        }
        for (r, x) in rs.var.iter_mut().zip(v) {
            *r = ((1.0 - momentum) * *r + momentum * x) as f32 as f64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats>,
    layers: Vec<Layer>,
}

pub struct GenOutput {
    pub image: Var,
    /// One feature map per entry of `nce_layer_ids`, in order.
    pub features: Vec<Var>,
    pub norm_updates: NormUpdates,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &GeneratorConfig, init_std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new("G");
        let mut b = Builder {
            store: &mut store,
            rng,
            std: init_std,
            running: Vec::new(),
        };
        let nf = config.base_filters;
        let pm = config.padding;
        let mut layers = vec![Layer::Input];
        layers.push(Layer::Conv(b.conv(
            "stem",
            config.in_channels,
            nf,
            7,
            1,
            3,
            pm,
        )));
        layers.push(Layer::Norm(b.norm("stem_norm", nf)));
        layers.push(Layer::Relu);
        let mut c = nf;
        for d in 0..config.n_downsample {
            layers.push(Layer::Conv(b.conv(
                &format!("down{d}"),
                c,
                2 * c,
                3,
                2,
                1,
                PadMode::Zero,
            )));
            layers.push(Layer::Norm(b.norm(&format!("down{d}_norm"), 2 * c)));
            layers.push(Layer::Relu);
            c *= 2;
        }
        for r in 0..config.n_resblocks {
            let c1 = b.conv(&format!("res{r}.conv1"), c, c, 3, 1, 1, pm);
            let n1 = b.norm(&format!("res{r}.norm1"), c);
            let c2 = b.conv(&format!("res{r}.conv2"), c, c, 3, 1, 1, pm);
            let n2 = b.norm(&format!("res{r}.norm2"), c);
            layers.push(Layer::Res { c1, n1, c2, n2 });
        }
        for u in 0..config.n_downsample {
            let name = format!("up{u}");
            layers.push(match config.upsample {
                Upsample::Transpose => Layer::ConvT(b.conv_t(&name, c, c / 2)),
                Upsample::NearestConv => Layer::UpConv(b.conv(&name, c, c / 2, 3, 1, 1, pm)),
            });
            layers.push(Layer::Norm(b.norm(&format!("up{u}_norm"), c / 2)));
            layers.push(Layer::Relu);
            c /= 2;
        }
        layers.push(Layer::Conv(b.conv(
            "head",
            c,
            config.out_channels,
            7,
            1,
            3,
            pm,
        )));
        layers.push(Layer::Tanh);
        let running = b.running;
        Ok(Self {
            config: config.clone(),
            params: store,
            running,
            layers,
        })
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.config.n_downsample
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        stop_after: Option<usize>,
    ) -> Result<GenOutput> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let div = self.size_multiple();
        if h % div != 0 || w % div != 0 {
            return Err(ModelError::Shape { h, w, div });
        }
        let (p, kind) = (&self.params, self.config.norm);
        let mut updates = Vec::new();
        let mut features = Vec::with_capacity(self.config.nce_layer_ids.len());
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Input => cur,
                Layer::Conv(c) => apply_conv(g, p, cur, c)?,
                Layer::ConvT(c) => {
                    let (wv, bv) = (g.param(p, c.w), g.param(p, c.b));
                    g.conv_transpose2d(cur, wv, Some(bv), c.stride, c.pad, 1)?
                }
                Layer::UpConv(c) => {
                    let up = g.upsample_nearest2x(cur)?;
                    apply_conv(g, p, up, c)?
                }
                Layer::Norm(n) => {
                    apply_norm(g, p, &self.running, kind, mode, cur, n, &mut updates)?
                }
                Layer::Relu => g.relu(cur),
                Layer::Tanh => g.tanh(cur),
                Layer::Res { c1, n1, c2, n2 } => {
                    let a = apply_conv(g, p, cur, c1)?;
                    let a = apply_norm(g, p, &self.running, kind, mode, a, n1, &mut updates)?;
                    let a = g.relu(a);
                    let a = apply_conv(g, p, a, c2)?;
                    let a = apply_norm(g, p, &self.running, kind, mode, a, n2, &mut updates)?;
                    g.add(cur, a)?
                }
            };
            if self.config.nce_layer_ids.contains(&i) {
                features.push(cur);
            }
            if stop_after == Some(i) {
                break;
            }
        }
        Ok(GenOutput {
            image: cur,
            features,
            norm_updates: updates,
        })
    }

    /// Translate `x` ([B, C, H, W], values in [-1, 1]) and capture the NCE
    /// feature maps along the way.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<GenOutput> {
        self.run(g, x, mode, None)
    }

    /// Encoder pass that stops at the last NCE layer.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Vec<Var>> {
        let last = *self
            .config
            .nce_layer_ids
            .last()
            .expect("validated non-empty");
        Ok(self.run(g, x, mode, Some(last))?.features)
    }

    pub fn update_running(&mut self, updates: &NormUpdates, momentum: f64) {
        update_running(&mut self.running, updates, momentum);
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    convs: Vec<ConvP>,
    norms: Vec<Option<NormP>>,
    running: Vec<RunningStats>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &DiscriminatorConfig, init_std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new("D");
        let mut b = Builder {
            store: &mut store,
            rng,
            std: init_std,
            running: Vec::new(),
        };
        let (k, pad) = (config.kernel, config.padding);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = config.in_channels;
        let mut cout = config.base_filters;
        for i in 0..config.n_layers {
            convs.push(b.conv(&format!("conv{i}"), cin, cout, k, 2, pad, PadMode::Zero));
            norms.push((i > 0).then(|| b.norm(&format!("norm{i}"), cout)));
            cin = cout;
            cout *= 2;
        }
        let n = config.n_layers;
        convs.push(b.conv(&format!("conv{n}"), cin, cin, k, 1, pad, PadMode::Zero));
        norms.push(Some(b.norm(&format!("norm{n}"), cin)));
        convs.push(b.conv("score", cin, 1, k, 1, pad, PadMode::Zero));
        norms.push(None);
        let running = b.running;
        Ok(Self {
            config: config.clone(),
            params: store,
            convs,
            norms,
            running,
        })
    }

    /// Raw patch scores [B, 1, h, w]; always normalizes with batch statistics.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let slope = T::of(self.config.leaky_slope);
        let mut cur = x;
        let last = self.convs.len() - 1;
        let mut sink = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            cur = apply_conv(g, &self.params, cur, c)?;
            if let Some(n) = n {
                cur = apply_norm(
                    g,
                    &self.params,
                    &self.running,
                    self.config.norm,
                    Mode::Train,
                    cur,
                    n,
                    &mut sink,
                )?;
            }
            if i < last {
                cur = g.leaky_relu(cur, slope);
            }
        }
        Ok(cur)
    }
}

/// `L2Norm(Linear2(ReLU(Linear1(h))))`, one head per NCE layer.
#[derive(Debug, Clone)]
pub struct ProjectionHeads<T: Scalar> {
    pub params: ParamStore<T>,
    pub embed_dim: usize,
    heads: Vec<[ParamId; 4]>,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn new(
        in_channels: &[usize],
        embed_dim: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut store = ParamStore::new("H");
        let heads = in_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                [
                    store.add_normal(format!("mlp{l}.w1"), &[embed_dim, c], 0.0, init_std, rng),
                    store.add_full(format!("mlp{l}.b1"), &[embed_dim], 0.0),
                    store.add_normal(
                        format!("mlp{l}.w2"),
                        &[embed_dim, embed_dim],
                        0.0,
                        init_std,
                        rng,
                    ),
                    store.add_full(format!("mlp{l}.b2"), &[embed_dim], 0.0),
                ]
            })
            .collect();
        Self {
            params: store,
            embed_dim,
            heads,
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Project rows [N, C] of layer `l` to unit vectors [N, embed_dim].
    pub fn project(&self, g: &mut Graph<T>, l: usize, rows: Var) -> Result<Var> {
        let ids = self.heads[l];
        let p: Vec<Var> = ids.iter().map(|&id| g.param(&self.params, id)).collect();
        let h = g.linear(rows, p[0], Some(p[1]))?;
        let h = g.relu(h);
        let h = g.linear(h, p[2], Some(p[3]))?;
        Ok(g.l2_normalize(h)?)
    }
}

/// Positions drawn uniformly without replacement from `hw` locations. When
/// fewer than `num_patches` exist, every location is used (in shuffled
/// order) and the second value is `true`.
pub fn sample_indices<R: Rng>(hw: usize, num_patches: usize, rng: &mut R) -> (Vec<usize>, bool) {
    if num_patches >= hw {
        let mut all: Vec<usize> = (0..hw).collect();
        all.shuffle(rng);
        return (all, num_patches > hw);
    }
    (
        rand::seq::index::sample(rng, hw, num_patches).into_vec(),
        false,
    )
}

#[derive(Debug, Clone)]
pub struct PatchSampleSet {
    pub layer_id: usize,
    pub spatial_indices: Vec<usize>,
    /// Embeddings of the translated image's features, [B·P, embed_dim].
    pub query: Var,
    /// Embeddings of the input image's features at the same positions.
    pub positive: Var,
    /// Fewer locations than requested were available.
    pub too_few_locations: bool,
}

/// Sample shared positions per layer and project both feature sets.
pub fn sample_patch_embeddings<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    heads: &ProjectionHeads<T>,
    layer_ids: &[usize],
    feats_x: &[Var],
    feats_yhat: &[Var],
    num_patches: usize,
    rng: &mut R,
) -> Result<Vec<PatchSampleSet>> {
    if feats_x.len() != feats_yhat.len()
        || feats_x.len() != heads.len()
        || layer_ids.len() != heads.len()
    {
        return Err(ModelError::Config(format!(
            "{} input / {} output feature maps for {} heads",
            feats_x.len(),
            feats_yhat.len(),
            heads.len()
        )));
    }
    let mut out = Vec::with_capacity(heads.len());
    for l in 0..heads.len() {
        let (sx, sy) = (
            g.value(feats_x[l]).shape().to_vec(),
            g.value(feats_yhat[l]).shape().to_vec(),
        );
        if sx != sy {
            return Err(AutogradError::Shape(format!("layer {l}: {sx:?} vs {sy:?}")).into());
        }
        let (_, _, h, w) = g.value(feats_x[l]).dims4()?;
        let (idx, flagged) = sample_indices(h * w, num_patches, rng);
        if flagged {
            log::warn!(
                "layer {}: {} locations for {} requested patches",
                layer_ids[l],
                h * w,
                num_patches
            );
        }
        let qrows = g.gather_positions(feats_yhat[l], &idx)?;
        let krows = g.gather_positions(feats_x[l], &idx)?;
        let query = heads.project(g, l, qrows)?;
        let positive = heads.project(g, l, krows)?;
        out.push(PatchSampleSet {
            layer_id: layer_ids[l],
            spatial_indices: idx,
            query,
            positive,
            too_few_locations: flagged,
        });
    }
    Ok(out)
}

/// Generator, discriminator and projection heads together.
#[derive(Debug, Clone)]
pub struct CutModel<T: Scalar> {
    pub config: ModelConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Scalar> CutModel<T> {
    /// Initialize every weight from N(0, init_std²) (norm scales from
    /// N(1, init_std²)), biases at zero, drawing in G, D, heads order.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(&config.generator, config.init_std, &mut rng)?;
        let discriminator = Discriminator::new(&config.discriminator, config.init_std, &mut rng)?;
        let chans: Vec<usize> = config
            .generator
            .nce_layer_ids
            .iter()
            .map(|&l| config.generator.layer_geometry(l).0)
            .collect();
        let heads = ProjectionHeads::new(&chans, config.embed_dim, config.init_std, &mut rng);
        Ok(Self {
            config: config.clone(),
            generator,
            discriminator,
            heads,
        })
    }

    /// Named tensors for checkpointing: parameters under `G/`, `D/`, `H/`
    /// and generator running statistics under `G.running/`.
    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for store in [
            &self.generator.params,
            &self.discriminator.params,
            &self.heads.params,
        ] {
            for (name, t) in store.iter() {
                out.push((format!("{}/{name}", store.tag()), t.clone()));
            }
        }
        for rs in &self.generator.running {
            let c = rs.mean.len();
            out.push((
                format!("G.running/{}.mean", rs.name),
                Tensor::from_f64(&[c], &rs.mean).expect("shape"),
            ));
            out.push((
                format!("G.running/{}.var", rs.name),
                Tensor::from_f64(&[c], &rs.var).expect("shape"),
            ));
        }
        out
    }

    pub fn load_entries<U: Scalar>(&mut self, entries: &[(String, Tensor<U>)]) -> Result<()> {
        for store in [
            &mut self.generator.params,
            &mut self.discriminator.params,
            &mut self.heads.params,
        ] {
            let prefix = format!("{}/", store.tag());
            let sub: Vec<(String, Tensor<U>)> = entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            store.load(&sub)?;
        }
        for rs in &mut self.generator.running {
            for (suffix, dst) in [("mean", &mut rs.mean), ("var", &mut rs.var)] {
                let key = format!("G.running/{}.{suffix}", rs.name);
                let (_, t) = entries
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| AutogradError::UnknownParam(key.clone()))?;
                if t.numel() != dst.len() {
                    return Err(AutogradError::Shape(key).into());
                }
                *dst = t.data().iter().map(|v| v.f64()).collect();
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.generator.params.num_scalars()
            + self.discriminator.params.num_scalars()
            + self.heads.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_and_score_sizes() {
        let d = DiscriminatorConfig::paper();
        assert_eq!(d.receptive_field(), 70);
        assert_eq!(d.output_size(70), Some(1));
        assert_eq!(d.output_size(256), Some(24));
        assert_eq!(DiscriminatorConfig::desk().output_size(64), Some(6));
    }

    #[test]
    fn layer_geometry_desk() {
        let c = GeneratorConfig::desk();
        assert_eq!(c.layer_geometry(0), (1, 1));
        assert_eq!(c.layer_geometry(4), (32, 2));
        assert_eq!(c.layer_geometry(8), (64, 4));
        assert_eq!(c.layer_geometry(12), (64, 4));
        assert_eq!(c.last_encoder_layer(), 13);
    }

    #[test]
    fn invalid_nce_layers_rejected() {
        let c = GeneratorConfig {
            nce_layer_ids: vec![0, 20],
            ..GeneratorConfig::desk()
        };
        assert!(c.validate().is_err());
        let c = GeneratorConfig {
            nce_layer_ids: vec![4, 0],
            ..GeneratorConfig::desk()
        };
        assert!(c.validate().is_err());
    }
}
