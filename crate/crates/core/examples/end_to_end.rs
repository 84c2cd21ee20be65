//! The whole on-disk pipeline at toy scale: synth, preprocess, train, eval,
//! infer and report. Pass a directory to keep the outputs.

use std::path::PathBuf;

use ntlcut::model::{DiscriminatorConfig, GeneratorConfig, ModelConfig};
use ntlcut::pipeline::{
    run_eval, run_infer, run_preprocess, run_report, run_synth, run_train, EvalConfig,
    PreprocessConfig,
};
use ntlcut::synth::{SceneSetConfig, SceneSpec};
use ntlcut::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let d = |s: &str| root.join(s);

    let synth = SceneSetConfig {
        n_scenes: 40,
        base: SceneSpec {
            width: 64,
            height: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    run_synth(&synth, &d("raw"))?;
    let counts = run_preprocess(
        &PreprocessConfig {
            patch_size: 32,
            ..Default::default()
        },
        &d("raw"),
        &d("dataset"),
        false,
    )?;
    println!("pairs per split: {:?}", counts.pairs);

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
    cfg.constant_epochs = 2;
    cfg.decay_epochs = 2;
    let summary = run_train(&cfg, &d("dataset"), &d("run"), false)?;
    println!(
        "trained {} iterations in {:.1} s, best epoch {:?}",
        summary.iterations, summary.seconds, summary.best_epoch
    );

    let rep = run_eval(
        &d("dataset"),
        Some(&d("run")),
        None,
        &EvalConfig::default(),
        &d("eval"),
    )?;
    for m in &rep.methods {
        println!(
            "{:20} R2 {:>8.4}  SSIM {:.4}",
            m.method,
            m.r_squared.unwrap_or(f64::NAN),
            m.ssim_mean.unwrap_or(f64::NAN)
        );
    }

    let scene = d("raw").join("scene_0025_dmsp.tif");
    let s = run_infer(&d("run"), None, &d("dataset"), &scene, 8, &d("infer"))?;
    println!(
        "calibrated {}x{} scene in {} tiles",
        s.width, s.height, s.tiles
    );

    run_report(&d("eval"), Some(&d("run")), &d("report.md"))?;
    println!("report written to {}", d("report.md").display());
    Ok(())
}
