//! Agreement metrics and the two classical baselines on a toy saturating
//! sensor: true radiance is compressed into 64 levels, then mapped back.

use ntlcut::eval::{
    apply_linear, baseline_histmatch, baseline_linear, metrics_report, total_variation,
    DEFAULT_BIN_EDGES,
};
use ntlcut::synth::compress_to_dn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let law = LogNormal::new(2.0, 1.2)?;
    let (w, n_patches) = (32, 12);
    let h = w;
    let truth: Vec<Vec<f64>> = (0..n_patches)
        .map(|_| (0..w * h).map(|_| law.sample(&mut r)).collect())
        .collect();
    let dn: Vec<Vec<f64>> = truth
        .iter()
        .map(|p| p.iter().map(|&v| compress_to_dn(v, 30.0).round()).collect())
        .collect();

    let (all_dn, all_truth) = (dn.concat(), truth.concat());
    let fit = baseline_linear(&all_dn, &all_truth)?;
    println!(
        "log-domain fit: slope {:.3}, intercept {:.3}",
        fit.slope, fit.intercept
    );
    let linear: Vec<Vec<f64>> = dn
        .iter()
        .map(|p| p.iter().map(|&v| apply_linear(&fit, v)).collect())
        .collect();

    // Histogram matching runs on 8-bit codes of log1p values.
    let to_code = |v: f64, top: f64| ((v.ln_1p() / top) * 255.0).round().clamp(0.0, 255.0) as u8;
    let top_t = all_truth.iter().fold(0.0f64, |a, &b| a.max(b.ln_1p()));
    let top_d = 63f64.ln_1p();
    let src: Vec<u8> = all_dn.iter().map(|&v| to_code(v, top_d)).collect();
    let reference: Vec<u8> = all_truth.iter().map(|&v| to_code(v, top_t)).collect();
    let matched = baseline_histmatch(&src, &reference)?;
    println!(
        "histogram TV before {:.3}, after {:.3}",
        total_variation(&src, &reference),
        total_variation(&matched, &reference)
    );
    let hm: Vec<f64> = matched
        .iter()
        .map(|&c| (c as f64 / 255.0 * top_t).exp_m1())
        .collect();
    let hm: Vec<Vec<f64>> = hm.chunks(w * h).map(|c| c.to_vec()).collect();

    println!("method      R2      SSIM    MAE");
    for (name, pred) in [("linear", &linear), ("histmatch", &hm)] {
        let rep = metrics_report(name, pred, &truth, w, &DEFAULT_BIN_EDGES, top_t.exp_m1())?;
        println!(
            "{name:10} {:7.4} {:7.4} {:7.3}",
            rep.r_squared.unwrap_or(f64::NAN),
            rep.ssim_mean.unwrap_or(f64::NAN),
            rep.mae.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
