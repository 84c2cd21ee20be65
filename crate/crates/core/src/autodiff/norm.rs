use serde::{Deserialize, Serialize};

use super::Scalar;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Statistics per channel over (N, H, W).
    Batch,
    /// Statistics per (sample, channel) over (H, W).
    Instance,
}

/// Group index of element (n, c) and the number of groups.
pub(crate) fn group_of(kind: NormKind, n: usize, c: usize, channels: usize) -> usize {
    match kind {
        NormKind::Batch => c,
        NormKind::Instance => n * channels + c,
    }
}

pub(crate) fn n_groups(kind: NormKind, n: usize, c: usize) -> usize {
    match kind {
        NormKind::Batch => c,
        NormKind::Instance => n * c,
    }
}

/// Per-group mean and biased variance, accumulated in f64.
pub(crate) fn moments<T: Scalar>(
    x: &[T],
    kind: NormKind,
    dims: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, usize) {
    let (n, c, hw) = dims;
    let g = n_groups(kind, n, c);
    let count = match kind {
        NormKind::Batch => n * hw,
        NormKind::Instance => hw,
    };
    let mut sum = vec![0.0f64; g];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            sum[group_of(kind, i, ch, c)] +=
                x[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; g];
    for i in 0..n {
        for ch in 0..c {
            let gi = group_of(kind, i, ch, c);
            let base = (i * c + ch) * hw;
            sq[gi] += x[base..base + hw]
                .iter()
                .map(|v| (v.f64() - mean[gi]).powi(2))
                .sum::<f64>();
        }
    }
    let var = sq.iter().map(|s| s / count as f64).collect();
    (mean, var, count)
}
