//! Patchwise InfoNCE over `batch` groups of `per_image` embeddings.
//!
//! For image b and query i, the logits are `q_i · k_j / tau` over every
//! sampled location j of the same image; j == i is the positive, the other
//! `per_image - 1` locations are negatives. The loss is the softmax cross
//! entropy averaged over all `batch * per_image` queries.

use super::Scalar;

pub(crate) struct NceForward<T> {
    pub loss: T,
    /// Softmax probabilities, `batch` blocks of `per_image`² row-major.
    pub probs: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    batch: usize,
    per_image: usize,
    dim: usize,
    tau: T,
) -> NceForward<T> {
    let p = per_image;
    let mut probs = vec![T::zero(); batch * p * p];
    let mut total = T::zero();
    let inv_tau = T::one() / tau;
    for b in 0..batch {
        let qb = &q[b * p * dim..(b + 1) * p * dim];
        let kb = &k[b * p * dim..(b + 1) * p * dim];
        let logits = &mut probs[b * p * p..(b + 1) * p * p];
        T::gemm(
            p,
            dim,
            p,
            inv_tau,
            qb,
            dim,
            1,
            kb,
            1,
            dim,
            T::zero(),
            logits,
            p,
            1,
        );
        for i in 0..p {
            let row = &mut logits[i * p..(i + 1) * p];
            let (jmax, m) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
                    );
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != jmax)
                .map(|(_, &v)| (v - m).exp())
                .sum();
            let lse = m + rest.ln_1p();
            total += lse - row[i];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
    }
    NceForward {
        loss: total / T::of((batch * p) as f64),
        probs,
    }
}

/// Gradients w.r.t. `q` and `k` given the upstream scalar gradient.
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    probs: &[T],
    batch: usize,
    per_image: usize,
    dim: usize,
    tau: T,
    upstream: T,
) -> (Vec<T>, Vec<T>) {
    let p = per_image;
    let scale = upstream / (T::of((batch * p) as f64) * tau);
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dl = vec![T::zero(); p * p];
    for b in 0..batch {
        dl.copy_from_slice(&probs[b * p * p..(b + 1) * p * p]);
        for i in 0..p {
            dl[i * p + i] -= T::one();
        }
        let qb = &q[b * p * dim..(b + 1) * p * dim];
        let kb = &k[b * p * dim..(b + 1) * p * dim];
        // dQ = dL · K, dK = dL^T · Q
        T::gemm(
            p,
            p,
            dim,
            scale,
            &dl,
            p,
            1,
            kb,
            dim,
            1,
            T::zero(),
            &mut dq[b * p * dim..(b + 1) * p * dim],
            dim,
            1,
        );
        T::gemm(
            p,
            p,
            dim,
            scale,
            &dl,
            1,
            p,
            qb,
            dim,
            1,
            T::zero(),
            &mut dk[b * p * dim..(b + 1) * p * dim],
            dim,
            1,
        );
    }
    (dq, dk)
}
