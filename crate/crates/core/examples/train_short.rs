//! A few training steps of a narrow CUT model on toy blobs, printing the
//! three losses and the learning rate schedule.

use ntlcut::autodiff::Tensor;
use ntlcut::model::{DiscriminatorConfig, GeneratorConfig, ModelConfig};
use ntlcut::train::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(r: &mut ChaCha8Rng, batch: usize, size: usize, gain: f32) -> Tensor<f32> {
    let mut data = Vec::with_capacity(batch * size * size);
    for _ in 0..batch {
        let (cx, cy) = (r.gen_range(8.0..24.0f32), r.gen_range(8.0..24.0f32));
        for i in 0..size * size {
            let (x, y) = ((i % size) as f32 - cx, (i / size) as f32 - cy);
            data.push((gain * (-(x * x + y * y) / 30.0).exp()).min(1.0) * 2.0 - 1.0);
        }
    }
    Tensor::new(&[batch, 1, size, size], data).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig {
        generator: GeneratorConfig {
            base_filters: 8,
            n_resblocks: 2,
            nce_layer_ids: vec![0, 4, 8, 11],
            ..GeneratorConfig::desk()
        },
        discriminator: DiscriminatorConfig {
            base_filters: 8,
            ..DiscriminatorConfig::desk()
        },
        embed_dim: 64,
        init_std: 0.02,
    };
    cfg.patch_size = 32;
    cfg.num_patches = 64;
    cfg.weights.num_negatives = 63;
    cfg.constant_epochs = 5;
    cfg.decay_epochs = 5;
    let schedule = cfg.schedule();
    let mut trainer = Trainer::new(cfg)?;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    println!("step    lr        gan_g   gan_d   nce");
    for step in 1..=10 {
        // One step stands in for one epoch of the schedule.
        let lr = schedule.lr_at(step);
        // Saturated, flat-topped sources; sharp, peaked targets.
        let (x, y) = (blobs(&mut r, 4, 32, 3.0), blobs(&mut r, 4, 32, 1.0));
        let (g, d, n) = trainer.step(x, y, lr, &mut r)?;
        println!("{step:5} {lr:.2e} {g:7.4} {d:7.4} {n:7.4}");
    }
    Ok(())
}
