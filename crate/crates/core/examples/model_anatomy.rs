//! Inspect the desk and paper CUT presets: parameter counts, the encoder
//! layers feeding PatchNCE, and the PatchGAN score map.

use ntlcut::autodiff::{Graph, Tensor};
use ntlcut::model::{CutModel, Mode, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, cfg, size) in [
        ("desk", ModelConfig::desk(), 64),
        ("paper", ModelConfig::paper(), 256),
    ] {
        let d = &cfg.discriminator;
        println!(
            "{name}: receptive field {}, score map {:?} at {size}px",
            d.receptive_field(),
            d.output_size(size)
        );
        if name == "paper" {
            continue;
        }
        let m = CutModel::<f32>::new(&cfg, 42)?;
        println!("  parameters: {}", m.num_parameters());
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, size, size], 0.0));
        let out = m.generator.forward(&mut g, x, Mode::Eval)?;
        for (id, f) in cfg.generator.nce_layer_ids.iter().zip(&out.features) {
            println!("  NCE layer {id:2}: {:?}", g.value(*f).shape());
        }
        let score = m.discriminator.forward(&mut g, out.image)?;
        println!(
            "  image {:?} -> score map {:?}",
            g.value(out.image).shape(),
            g.value(score).shape()
        );
    }
    Ok(())
}
