//! Build a small paired dataset: synthesize scenes on a geographic grid,
//! tile them, filter, calibrate and split by 5-degree blocks.

use ntlcut::pipeline::{run_preprocess, run_synth, Dataset, PreprocessConfig};
use ntlcut::preprocess::Split;
use ntlcut::synth::{SceneSetConfig, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let (raw, ds) = (dir.path().join("raw"), dir.path().join("dataset"));
    let synth = SceneSetConfig {
        n_scenes: 40,
        base: SceneSpec {
            width: 96,
            height: 96,
            ..Default::default()
        },
        ..Default::default()
    };
    run_synth(&synth, &raw)?;
    let cfg = PreprocessConfig {
        patch_size: 32,
        ..Default::default()
    };
    let counts = run_preprocess(&cfg, &raw, &ds, false)?;
    println!("{}", serde_json::to_string_pretty(&counts)?);

    let data = Dataset::load(&ds)?;
    println!(
        "DMSP log1p range [{:.3}, {:.3}], VIIRS log1p range [{:.3}, {:.3}]",
        data.info.dmsp_calibration.v_min,
        data.info.dmsp_calibration.v_max,
        data.info.viirs_calibration.v_min,
        data.info.viirs_calibration.v_max
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} pairs", data.pairs(split)?.len());
    }
    Ok(())
}
