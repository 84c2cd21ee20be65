//! Tiny CUT model and a parameter-level finite-difference checker.

use ntlcut::autodiff::{Graph, NormKind, PadMode, ParamStore, Tensor, Var};
use ntlcut::model::{
    sample_patch_embeddings, CutModel, DiscriminatorConfig, GeneratorConfig, Mode, ModelConfig,
    Upsample,
};
use ntlcut::train::{lsgan_g_loss, lsgan_losses, patch_nce_loss, total_loss, LossWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_tensor, rng};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            in_channels: 1,
            out_channels: 1,
            base_filters: 2,
            n_resblocks: 1,
            n_downsample: 2,
            padding: PadMode::Reflect,
            norm: NormKind::Batch,
            upsample: Upsample::Transpose,
            nce_layer_ids: vec![0, 4, 8, 10],
        },
        discriminator: DiscriminatorConfig {
            base_filters: 2,
            n_layers: 1,
            padding: 1,
            ..DiscriminatorConfig::paper()
        },
        embed_dim: 4,
        // Larger than the training default so activations are not all tiny.
        init_std: 0.5,
    }
}

/// Generator objective of the tiny model: GAN + PatchNCE with a fixed
/// sampling seed, so every evaluation draws the same positions.
pub fn generator_objective(m: &CutModel<f64>, x: &Tensor<f64>) -> (Graph<f64>, Var) {
    let w = LossWeights::cut();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = m.generator.forward(&mut g, xv, Mode::Train).unwrap();
    let df = m.discriminator.forward(&mut g, out.image).unwrap();
    let gan = lsgan_g_loss(&mut g, df);
    let fq = m.generator.encode(&mut g, out.image, Mode::Train).unwrap();
    let ids = m.config.generator.nce_layer_ids.clone();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let s = sample_patch_embeddings(&mut g, &m.heads, &ids, &out.features, &fq, 4, &mut r).unwrap();
    let nce = patch_nce_loss(&mut g, &s, x.shape()[0], &w).unwrap();
    let total = total_loss(&mut g, gan, nce, &w);
    (g, total)
}

pub fn discriminator_objective(
    m: &CutModel<f64>,
    real: &Tensor<f64>,
    fake: &Tensor<f64>,
) -> (Graph<f64>, Var) {
    let mut g = Graph::new();
    let (r, f) = (g.input(real.clone()), g.input(fake.clone()));
    let (ld, _) = lsgan_losses(&mut g, &m.discriminator, r, f).unwrap();
    (g, ld)
}

pub enum Store {
    G,
    D,
    H,
}

pub fn store_mut<'a>(m: &'a mut CutModel<f64>, s: &Store) -> &'a mut ParamStore<f64> {
    match s {
        Store::G => &mut m.generator.params,
        Store::D => &mut m.discriminator.params,
        Store::H => &mut m.heads.params,
    }
}

/// Max elementwise relative error between analytic and central-difference
/// gradients over every scalar of the chosen parameter stores.
pub fn param_gradcheck<F>(model: &CutModel<f64>, stores: &[Store], objective: F) -> (f64, usize)
where
    F: Fn(&CutModel<f64>) -> (Graph<f64>, Var),
{
    let h = 1e-5;
    let (mut g, loss) = objective(model);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for s in stores {
        let mut m = model.clone();
        let analytic = g.param_grads(store_mut(&mut m, s));
        let ids: Vec<_> = store_mut(&mut m, s).ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let n = store_mut(&mut m, s).get(id).numel();
            for j in 0..n {
                let orig = store_mut(&mut m, s).get(id).data()[j];
                store_mut(&mut m, s).get_mut(id).data_mut()[j] = orig + h;
                let (gp, lp) = objective(&m);
                store_mut(&mut m, s).get_mut(id).data_mut()[j] = orig - h;
                let (gm, lm) = objective(&m);
                store_mut(&mut m, s).get_mut(id).data_mut()[j] = orig;
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic[pi].as_ref().map(|v| v[j]).unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Fresh models sit on special points (zero biases make some projected rows
/// exactly zero); move every parameter to a generic nearby point.
pub fn jittered(seed: u64) -> CutModel<f64> {
    let mut m = CutModel::<f64>::new(&tiny_config(), seed).unwrap();
    let mut r = rng(seed + 100);
    for s in [Store::G, Store::D, Store::H] {
        let store = store_mut(&mut m, &s);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let noise = random_tensor(t.shape(), &mut r);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.1 * n;
            }
        }
    }
    m
}
