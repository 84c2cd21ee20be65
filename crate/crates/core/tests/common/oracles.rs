//! Straightforward reference implementations used as test oracles. Nothing
//! here calls into the library's numerical code.

/// Direct nested-loop cross-correlation; `x` is [Ci][H][W], `w` is
/// [Co][Ci][k][k]; `reflect` selects mirror padding instead of zeros.
pub fn naive_conv2d(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    reflect: bool,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let fetch = |c: usize, y: isize, xx: isize| -> f64 {
        let (mut y, mut xx) = (y, xx);
        if reflect {
            if y < 0 {
                y = -y;
            }
            if y >= h as isize {
                y = 2 * (h as isize - 1) - y;
            }
            if xx < 0 {
                xx = -xx;
            }
            if xx >= w as isize {
                xx = 2 * (w as isize - 1) - xx;
            }
        } else if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            return 0.0;
        }
        x[c * h * w + y as usize * w + xx as usize]
    };
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            s += wt[((o * ci + c) * k + ky) * k + kx] * fetch(c, y, xx);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Scatter definition of the transposed convolution; `w` is [Ci][Co][k][k].
pub fn naive_conv_transpose2d(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, k): (usize, usize),
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (w - 1) * stride + k + output_padding - 2 * pad;
    let mut out = vec![0.0; co * oh * ow];
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(c * h + iy) * w + ix];
                for o in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (iy * stride + ky) as isize - pad as isize;
                            let xx = (ix * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                out[(o * oh + y as usize) * ow + xx as usize] +=
                                    v * wt[((c * co + o) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Explicit softmax cross entropy for one image: for each query i, class i
/// among `keys` is the positive. Returns the mean over queries.
pub fn brute_force_nce(queries: &[Vec<f64>], keys: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let pos = (dot(q, &keys[i]) / tau).exp();
        let mut denom = pos;
        for (j, k) in keys.iter().enumerate() {
            if j != i {
                denom += (dot(q, k) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / queries.len() as f64
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (1-based) with ties sharing the mean rank, by counting.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    naive_pearson(&naive_ranks(x), &naive_ranks(y))
}

pub fn naive_r2(pred: &[f64], truth: &[f64]) -> f64 {
    let m = mean(truth);
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn naive_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    2.0 * cov / (vx + vy + (mx - my).powi(2))
}

/// Gaussian-window SSIM evaluated window by window with direct weighted
/// sums; mean over all fully contained windows.
pub fn naive_ssim(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    win: usize,
    sigma: f64,
    data_range: f64,
) -> f64 {
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let half = (win as f64 - 1.0) / 2.0;
    let mut kernel = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            kernel[i * win + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[i * win + j];
                    let (va, vb) = (a[(y0 + i) * w + x0 + j], b[(y0 + i) * w + x0 + j]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
