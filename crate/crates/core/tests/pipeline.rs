mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use ntlcut::model::{CutModel, ModelConfig};
use ntlcut::pipeline::{
    self, infer_raster, run_eval, run_preprocess, run_report, run_synth, EvalConfig, InferConfig,
    PipelineError, PreprocessConfig, RunConfig,
};
use ntlcut::raster::{Origin, RadiometricCalibration, Raster};
use ntlcut::synth::{SceneSetConfig, SceneSpec};

fn small_synth() -> SceneSetConfig {
    SceneSetConfig {
        n_scenes: 24,
        columns: 6,
        base: SceneSpec {
            width: 64,
            height: 64,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_pre() -> PreprocessConfig {
    PreprocessConfig {
        patch_size: 32,
        ..Default::default()
    }
}

fn dataset(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (raw, ds) = (root.join("raw"), root.join("ds"));
    run_synth(&small_synth(), &raw).unwrap();
    run_preprocess(&small_pre(), &raw, &ds, false).unwrap();
    (raw, ds)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ntlcut"))
}

#[test]
fn synth_is_deterministic_and_handles_zero_scenes() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_synth();
    run_synth(&cfg, &t.path().join("a")).unwrap();
    run_synth(&cfg, &t.path().join("b")).unwrap();
    for f in [
        "scenes.jsonl",
        "scene_0003_viirs.tif",
        "scene_0003_dmsp.tif",
        "resolved_config.json",
    ] {
        assert_eq!(
            fs::read(t.path().join("a").join(f)).unwrap(),
            fs::read(t.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let recs = run_synth(
        &SceneSetConfig { n_scenes: 0, ..cfg },
        &t.path().join("empty"),
    )
    .unwrap();
    assert!(recs.is_empty());
    assert_eq!(
        fs::read_to_string(t.path().join("empty/scenes.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn preprocess_dry_run_writes_nothing() {
    let t = tempfile::tempdir().unwrap();
    let raw = t.path().join("raw");
    run_synth(&small_synth(), &raw).unwrap();
    let dry = run_preprocess(&small_pre(), &raw, &t.path().join("dry"), true).unwrap();
    assert!(!t.path().join("dry").exists());
    let real = run_preprocess(&small_pre(), &raw, &t.path().join("ds"), false).unwrap();
    assert_eq!(dry, real);
    assert!(real.after_radiometric > 0);
    assert_eq!(real.pairs.values().sum::<usize>(), real.after_radiometric);
    let lines = fs::read_to_string(t.path().join("ds/manifest.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, 2 * real.after_radiometric);
}

#[test]
fn missing_land_mask_names_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let raw = t.path().join("raw");
    run_synth(&small_synth(), &raw).unwrap();
    let kept: Vec<String> = fs::read_to_string(raw.join("scenes.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"land\""))
        .map(String::from)
        .collect();
    fs::write(raw.join("scenes.jsonl"), kept.join("\n")).unwrap();
    let err = run_preprocess(&small_pre(), &raw, &t.path().join("ds"), false).unwrap_err();
    assert!(err.to_string().contains("--land-mask"), "{err}");

    let out = bin()
        .args(["--out-dir"])
        .arg(t.path().join("ds2"))
        .args(["preprocess", "--raw"])
        .arg(&raw)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--land-mask"));

    // Supplying a mask satisfies it.
    // One all-land mask spanning every scene of the grid.
    let px = small_synth().base.pixel_size;
    let o = small_synth().first_origin;
    let (w, h) = (5 * 600 + 64, 3 * 600 + 64);
    let mask = Raster::filled(
        w,
        h,
        px,
        Origin {
            lon: o.lon,
            lat: o.lat,
        },
        1.0,
    )
    .unwrap();
    let mask_path = t.path().join("mask.tif");
    ntlcut::raster::io::geotiff::write(&mask_path, &mask, ntlcut::raster::io::SampleFormat::U8)
        .unwrap();
    let cfg = PreprocessConfig {
        land_mask: Some(mask_path),
        ..small_pre()
    };
    assert!(run_preprocess(&cfg, &raw, &t.path().join("ds3"), true).is_ok());
}

#[test]
fn stages_reject_wrong_inputs() {
    let t = tempfile::tempdir().unwrap();
    let (raw, ds) = dataset(t.path());
    assert!(matches!(
        run_preprocess(&small_pre(), &ds, &t.path().join("x"), true),
        Err(PipelineError::StageOrder { .. })
    ));
    let e = pipeline::run_train(
        &ntlcut::train::TrainConfig::desk(),
        &raw,
        &t.path().join("run"),
        false,
    )
    .unwrap_err();
    assert!(matches!(e, PipelineError::StageOrder { .. }));
    assert!(matches!(
        run_eval(
            &ds,
            Some(&raw),
            None,
            &EvalConfig::default(),
            &t.path().join("ev")
        ),
        Err(PipelineError::StageOrder { .. })
    ));
    assert!(matches!(
        run_report(&ds, None, &t.path().join("r.md")),
        Err(PipelineError::StageOrder { .. })
    ));
}

#[test]
fn identity_eval_and_report_show_perfect_scores() {
    let t = tempfile::tempdir().unwrap();
    let (_, ds) = dataset(t.path());
    let ev = t.path().join("ev");
    let rep = run_eval(
        &ds,
        None,
        None,
        &EvalConfig {
            scatter_bins: 32,
            ..Default::default()
        },
        &ev,
    )
    .unwrap();
    let id = rep.method("identity").unwrap();
    assert_eq!(id.r_squared, Some(1.0));
    assert_eq!(id.mae, Some(0.0));
    assert!(
        rep.method("linear_regression").is_some() && rep.method("histogram_matching").is_some()
    );
    for f in [
        "report.json",
        "comparison.csv",
        "stratified.csv",
        "scatter.csv",
        "STAGE.json",
    ] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let scatter = fs::read_to_string(ev.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 32);
    let md = run_report(&ev, None, &t.path().join("report.md")).unwrap();
    assert!(md.contains("| identity | 1.0000 |"), "{md}");
    let strata = fs::read_to_string(ev.join("stratified.csv")).unwrap();
    assert!(strata.lines().any(|l| l.starts_with("identity,overall,")));
}

#[test]
fn manifest_mismatch_is_detected() {
    let t = tempfile::tempdir().unwrap();
    let (_, ds) = dataset(t.path());
    let m = fs::read_to_string(ds.join("manifest.jsonl")).unwrap();
    let victim = m
        .lines()
        .find(|l| l.contains("\"split\":\"test\"") && l.contains("\"source_domain\":\"dmsp\""))
        .unwrap();
    fs::write(
        ds.join("manifest.jsonl"),
        m.replace(&format!("{victim}\n"), ""),
    )
    .unwrap();
    let e = run_eval(
        &ds,
        None,
        None,
        &EvalConfig::default(),
        &t.path().join("ev"),
    )
    .unwrap_err();
    assert!(matches!(e, PipelineError::ManifestMismatch(_)), "{e}");
}

#[test]
fn infer_pads_and_crops() {
    let m = CutModel::<f32>::new(&ModelConfig::desk(), 1).unwrap();
    let cal = RadiometricCalibration::new(0.0, 4.2).unwrap();
    let vals: Vec<f32> = (0..70 * 50).map(|i| (i % 64) as f32).collect();
    let r = Raster::new(
        70,
        50,
        0.01,
        Origin {
            lon: 5.0,
            lat: 45.0,
        },
        vals,
        None,
    )
    .unwrap();
    let (out, s) = infer_raster(
        &m,
        &r,
        &cal,
        &cal,
        &InferConfig {
            patch_size: 32,
            overlap: 0,
        },
    )
    .unwrap();
    assert!(s.padded);
    assert_eq!((out.width(), out.height()), (70, 50));
    assert_eq!(s.tiles, 3 * 2);
    assert!(out.same_grid(&r));
    assert!(out.values().iter().all(|v| v.is_finite() && *v >= 0.0));

    let (out, s) = infer_raster(
        &m,
        &r,
        &cal,
        &cal,
        &InferConfig {
            patch_size: 32,
            overlap: 8,
        },
    )
    .unwrap();
    assert_eq!((out.width(), out.height()), (70, 50));
    assert_eq!(s.tiles, 3 * 2);

    let exact = Raster::filled(64, 64, 0.01, Origin { lon: 0.0, lat: 0.0 }, 10.0).unwrap();
    let (_, s) = infer_raster(
        &m,
        &exact,
        &cal,
        &cal,
        &InferConfig {
            patch_size: 32,
            overlap: 0,
        },
    )
    .unwrap();
    assert!(!s.padded);
    assert_eq!(s.tiles, 4);
}

#[test]
fn config_overrides_apply_dotted_keys() {
    let c = RunConfig::default()
        .with_overrides(&[
            "train.decay_epochs=3".into(),
            "preprocess.thresholds.tau_dark=0.2".into(),
        ])
        .unwrap();
    assert_eq!(c.train.decay_epochs, 3);
    assert_eq!(c.preprocess.thresholds.tau_dark, 0.2);
    assert!(RunConfig::default()
        .with_overrides(&["train.nope=1".into()])
        .is_err());
    assert!(RunConfig::default()
        .with_overrides(&["novalue".into()])
        .is_err());
}

#[test]
fn cli_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let bad = bin()
        .arg("--out-dir")
        .arg(blocker.join("sub"))
        .args(["synth", "--n-scenes", "1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(!bad.stderr.is_empty());

    let raw = t.path().join("raw");
    let ok = bin()
        .arg("--out-dir")
        .arg(&raw)
        .args(["--seed", "7", "--threads", "1", "synth", "--n-scenes", "0"])
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let resolved = fs::read_to_string(raw.join("resolved_config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 7"));

    let cfg = t.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"synth": {"n_scenes": 2, "base": {"width": 32, "height": 32}}}"#,
    )
    .expect("write config");
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(t.path().join("raw2"))
        .arg("synth")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read_to_string(t.path().join("raw2/scenes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn cli_dry_run_prints_counts() {
    let t = tempfile::tempdir().unwrap();
    let raw = t.path().join("raw");
    run_synth(&small_synth(), &raw).unwrap();
    let out = bin()
        .arg("--out-dir")
        .arg(t.path().join("ds"))
        .args([
            "preprocess",
            "--patch-size",
            "32",
            "--split",
            "70,15,15",
            "--dry-run",
            "--raw",
        ])
        .arg(&raw)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("after_radiometric"));
    assert!(!t.path().join("ds").exists());
}
