use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ntlcut::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "ntlcut",
    version,
    about = "DMSP-to-VIIRS nighttime-light calibration"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Config override, e.g. `--set train.decay_epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate paired synthetic scenes.
    Synth {
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Tile, filter, calibrate and split a raw scene directory.
    Preprocess(PreprocessArgs),
    /// Train the translation model on a preprocessed dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Translate a full DMSP raster.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tile overlap in pixels, blended with a feathered average.
        #[arg(long, default_value_t = 0)]
        overlap: usize,
    },
    /// Evaluate a run and the baselines on the test split.
    Eval {
        /// Dataset `manifest.jsonl` or its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Training run directory; omit together with --identity.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Side of the density scatter grid.
        #[arg(long)]
        bins: Option<usize>,
        /// Evaluate the truth against itself.
        #[arg(long)]
        identity: bool,
    },
    /// Render an evaluation as Markdown.
    Report {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    min_land: Option<f64>,
    #[arg(long)]
    max_lat: Option<f64>,
    #[arg(long)]
    tau_dark: Option<f64>,
    #[arg(long)]
    tau_uniform: Option<f64>,
    #[arg(long)]
    clip_q: Option<f64>,
    /// Train, val and test percentages, e.g. 70,15,15.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    /// Land mask raster for scenes without their own.
    #[arg(long)]
    land_mask: Option<PathBuf>,
    /// Print counts without writing anything.
    #[arg(long)]
    dry_run: bool,
}

fn dataset_dir(manifest: &Path) -> PathBuf {
    if manifest.is_file() {
        manifest.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        manifest.to_path_buf()
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("thread pool")?;

    let mut cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = &cli.out_dir;
    match cli.cmd {
        Cmd::Synth { n_scenes } => {
            if let Some(n) = n_scenes {
                cfg.synth.n_scenes = n;
            }
            let recs = pipeline::run_synth(&cfg.synth, out)?;
            println!("wrote {} rasters to {}", recs.len(), out.display());
        }
        Cmd::Preprocess(a) => {
            let p = &mut cfg.preprocess;
            p.patch_size = a.patch_size.unwrap_or(p.patch_size);
            let t = &mut p.thresholds;
            t.min_land_fraction = a.min_land.unwrap_or(t.min_land_fraction);
            t.max_abs_latitude = a.max_lat.unwrap_or(t.max_abs_latitude);
            t.tau_dark = a.tau_dark.unwrap_or(t.tau_dark);
            t.tau_uniform = a.tau_uniform.unwrap_or(t.tau_uniform);
            t.clip_quantile = a.clip_q.unwrap_or(t.clip_quantile);
            if let Some(s) = a.split {
                if s.len() != 3 {
                    bail!("--split takes three comma-separated values");
                }
                let total: f64 = s.iter().sum();
                if total <= 0.0 {
                    bail!("--split must have a positive sum");
                }
                p.fractions = [s[0] / total, s[1] / total, s[2] / total];
            }
            if a.land_mask.is_some() {
                p.land_mask = a.land_mask;
            }
            let counts = pipeline::run_preprocess(p, &a.raw, out, a.dry_run)?;
            println!("{}", serde_json::to_string_pretty(&counts)?);
        }
        Cmd::Train { dataset, resume } => {
            let s = pipeline::run_train(&cfg.train, &dataset, out, resume)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Infer {
            run,
            dataset,
            input,
            checkpoint,
            overlap,
        } => {
            let s =
                pipeline::run_infer(&run, checkpoint.as_deref(), &dataset, &input, overlap, out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Eval {
            manifest,
            run,
            checkpoint,
            bins,
            identity,
        } => {
            if run.is_none() && !identity {
                bail!("eval needs --run, or --identity for the truth-vs-truth check");
            }
            if let Some(b) = bins {
                cfg.eval.scatter_bins = b;
            }
            let run = if identity { None } else { run };
            let r = pipeline::run_eval(
                &dataset_dir(&manifest),
                run.as_deref(),
                checkpoint.as_deref(),
                &cfg.eval,
                out,
            )?;
            for m in &r.methods {
                println!(
                    "{:<20} R2={:?} SSIM={:?}",
                    m.method, m.r_squared, m.ssim_mean
                );
            }
        }
        Cmd::Report { eval, run } => {
            let path = out.join("report.md");
            pipeline::run_report(&eval, run.as_deref(), &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
