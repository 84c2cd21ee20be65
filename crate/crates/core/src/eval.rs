//! Agreement metrics, stratified error tables, SSIM and the two reference
//! calibrations (log-domain linear regression, histogram matching).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("zero variance in {0}; metric undefined")]
    ZeroVariance(&'static str),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("window {window} larger than image {w}x{h}")]
    WindowTooLarge { window: usize, w: usize, h: usize },
    #[error("least-squares fit is singular (predictor has zero variance)")]
    SingularFit,
    #[error("truth value {0} is not covered by the bin edges")]
    Uncovered(f64),
    #[error("invalid bin edges: {0}")]
    BadEdges(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(i % x.len()));
    }
    Ok(())
}

/// Means, population variances and covariance.
struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    Moments {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cov: cov / n,
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    let m = moments(x, y);
    if m.vx == 0.0 {
        return Err(MetricError::ZeroVariance("x"));
    }
    if m.vy == 0.0 {
        return Err(MetricError::ZeroVariance("y"));
    }
    Ok((m.cov / (m.vx * m.vy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let n = truth.len() as f64;
    let mt = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mt).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance("truth"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Lin's concordance correlation coefficient.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    let m = moments(x, y);
    let denom = m.vx + m.vy + (m.mx - m.my).powi(2);
    if denom == 0.0 {
        return Err(MetricError::ZeroVariance("x and y"));
    }
    Ok(2.0 * m.cov / denom)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooShort(0));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooShort(0));
    }
    Ok((pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

/// Radiance strata of the error table.
pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, f64::INFINITY];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub lower: f64,
    /// `None` for an open upper bound.
    pub upper: Option<f64>,
    pub pixel_count: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Errors per truth-value stratum `[edges[i], edges[i+1])`, followed by an
/// overall row. Empty strata report `None` metrics.
pub fn stratified_errors(pred: &[f64], truth: &[f64], edges: &[f64]) -> Result<Vec<StratumRow>> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MetricError::BadEdges(format!("{edges:?}")));
    }
    let nb = edges.len() - 1;
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); nb];
    for (&p, &t) in pred.iter().zip(truth) {
        let b = edges
            .windows(2)
            .position(|w| t >= w[0] && t < w[1])
            .ok_or(MetricError::Uncovered(t))?;
        groups[b].0.push(p);
        groups[b].1.push(t);
    }
    let row = |lower: f64, upper: f64, p: &[f64], t: &[f64]| StratumRow {
        lower,
        upper: upper.is_finite().then_some(upper),
        pixel_count: p.len(),
        mae: mae(p, t).ok(),
        rmse: rmse(p, t).ok(),
        r_squared: r_squared(p, t).ok(),
    };
    let mut rows: Vec<StratumRow> = groups
        .iter()
        .enumerate()
        .map(|(i, (p, t))| row(edges[i], edges[i + 1], p, t))
        .collect();
    rows.push(row(edges[0], edges[nb], pred, truth));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }
}

fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..n).map(|j| k[j] * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|j| k[j] * tmp[(y0 + j) * ow + x0]).sum();
        }
    }
    out
}

/// Mean Gaussian-window SSIM over all windows fully inside the image.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if p.window == 0 || p.window > w.min(h) {
        return Err(MetricError::WindowTooLarge {
            window: p.window,
            w,
            h,
        });
    }
    let half = (p.window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..p.window)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * p.sigma * p.sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<f64>>()
    };
    let ma = filter_valid(a, w, h, &k);
    let mb = filter_valid(b, w, h, &k);
    let saa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let sbb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let sab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = saa[i] - mu_a * mu_a;
        let vb = sbb[i] - mu_b * mu_b;
        let cov = sab[i] - mu_a * mu_b;
        total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
    Ok(total / ma.len() as f64)
}

/// `y ≈ slope·x + intercept` by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check(x, y)?;
        let m = moments(x, y);
        if m.vx == 0.0 {
            return Err(MetricError::SingularFit);
        }
        let slope = m.cov / m.vx;
        Ok(Self {
            slope,
            intercept: m.my - slope * m.mx,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Log-domain linear calibration fitted on paired radiance samples:
/// `log1p(viirs) ≈ a·log1p(dmsp) + b`.
pub fn baseline_linear(dmsp: &[f64], viirs: &[f64]) -> Result<LinearFit> {
    let lx: Vec<f64> = dmsp.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let ly: Vec<f64> = viirs.iter().map(|v| v.max(0.0).ln_1p()).collect();
    LinearFit::fit(&lx, &ly)
}

/// Radiance prediction of a fitted log-domain linear model.
pub fn apply_linear(fit: &LinearFit, dmsp: f64) -> f64 {
    fit.apply(dmsp.max(0.0).ln_1p()).exp_m1().max(0.0)
}

/// Monotone 256-level lookup matching the source code distribution to a
/// reference code distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMatch {
    pub lut: Vec<u8>,
}

fn cdf(codes: &[u8]) -> [f64; 256] {
    let mut h = [0.0f64; 256];
    for &c in codes {
        h[c as usize] += 1.0;
    }
    let n = codes.len().max(1) as f64;
    let mut acc = 0.0;
    for v in h.iter_mut() {
        acc += *v / n;
        *v = acc;
    }
    h
}

impl HistogramMatch {
    /// Each source level maps to the smallest reference level whose CDF
    /// reaches the source level's mid-step CDF.
    pub fn fit(source: &[u8], reference: &[u8]) -> Result<Self> {
        if source.is_empty() || reference.is_empty() {
            return Err(MetricError::TooShort(0));
        }
        let (cs, cr) = (cdf(source), cdf(reference));
        let lut = (0..256)
            .map(|s| {
                let prev = if s == 0 { 0.0 } else { cs[s - 1] };
                let target = 0.5 * (prev + cs[s]);
                cr.iter().position(|&c| c >= target - 1e-12).unwrap_or(255) as u8
            })
            .collect();
        Ok(Self { lut })
    }

    pub fn apply(&self, code: u8) -> u8 {
        self.lut[code as usize]
    }
}

/// Map `dmsp` codes through a lookup fitted against `reference` codes.
pub fn baseline_histmatch(dmsp: &[u8], reference: &[u8]) -> Result<Vec<u8>> {
    let m = HistogramMatch::fit(dmsp, reference)?;
    Ok(dmsp.iter().map(|&c| m.apply(c)).collect())
}

/// Total-variation distance between the 256-bin histograms of two code sets.
pub fn total_variation(a: &[u8], b: &[u8]) -> f64 {
    let h = |c: &[u8]| {
        let mut h = [0.0f64; 256];
        c.iter().for_each(|&v| h[v as usize] += 1.0);
        let n = c.len().max(1) as f64;
        h.map(|v| v / n)
    };
    let (ha, hb) = (h(a), h(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Agreement metrics of one method on the test set, in radiance units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_pixels: usize,
    pub n_patches: usize,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub r_squared: Option<f64>,
    pub ccc: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub stratified: Vec<StratumRow>,
    /// Metrics that could not be computed, with the reason.
    pub undefined: Vec<String>,
}

/// Metrics over patch-aligned predictions. `pred` and `truth` hold one
/// `side`×`side` patch per entry; SSIM uses `data_range`.
pub fn metrics_report(
    method: &str,
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    side: usize,
    edges: &[f64],
    data_range: f64,
) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    let p: Vec<f64> = pred.iter().flatten().copied().collect();
    let t: Vec<f64> = truth.iter().flatten().copied().collect();
    let mut undefined = Vec::new();
    let mut keep = |name: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            undefined.push(format!("{name}: {e}"));
            None
        }
    };
    let pearson_r = keep("pearson_r", pearson(&p, &t));
    let spearman_rho = keep("spearman_rho", spearman(&p, &t));
    let r2 = keep("r_squared", r_squared(&p, &t));
    let cc = keep("ccc", ccc(&p, &t));
    let ma = keep("mae", mae(&p, &t));
    let rm = keep("rmse", rmse(&p, &t));
    let params = SsimParams::with_range(data_range);
    let ssims: Vec<f64> = pred
        .iter()
        .zip(truth)
        .filter_map(|(a, b)| ssim(a, b, side, side, &params).ok())
        .collect();
    let (ssim_mean, ssim_std) = if ssims.is_empty() {
        undefined.push("ssim: no patch large enough for the window".into());
        (None, None)
    } else {
        let m = ssims.iter().sum::<f64>() / ssims.len() as f64;
        let v = ssims.iter().map(|s| (s - m).powi(2)).sum::<f64>() / ssims.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    Ok(MetricsReport {
        method: method.to_string(),
        n_pixels: p.len(),
        n_patches: pred.len(),
        pearson_r,
        spearman_rho,
        r_squared: r2,
        ccc: cc,
        mae: ma,
        rmse: rm,
        ssim_mean,
        ssim_std,
        stratified: stratified_errors(&p, &t, edges)?,
        undefined,
    })
}

/// `bins`×`bins` grid of `log10(1 + count)` over (truth, pred) pairs in
/// log1p radiance; rows index prediction (top = highest), columns truth.
pub fn density_grid(pred: &[f64], truth: &[f64], bins: usize) -> (Vec<f64>, f64) {
    let lp: Vec<f64> = pred.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let lt: Vec<f64> = truth.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let hi = lp
        .iter()
        .chain(&lt)
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut grid = vec![0.0f64; bins * bins];
    let cell = |v: f64| (((v / hi) * bins as f64) as usize).min(bins - 1);
    for (p, t) in lp.iter().zip(&lt) {
        grid[(bins - 1 - cell(*p)) * bins + cell(*t)] += 1.0;
    }
    grid.iter_mut().for_each(|c| *c = (1.0 + *c).log10());
    (grid, hi)
}
