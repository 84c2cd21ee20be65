#![allow(dead_code)]

pub mod fixture_check;
pub mod op_checks;
pub mod oracles;
pub mod reference;
pub mod tiny;

use ntlcut::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, so kinks at 0 are not straddled by
/// the finite-difference step.
pub fn nonzero_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central-difference check of every input element. `build` maps the input
/// leaves to a scalar loss.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let h = 1e-4;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(*v).numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradReport {
        max_rel_err,
        checked,
    }
}

/// sum(v ⊙ w) for a fixed random weighting `w`, giving a generic scalar head.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let w = random_tensor(&shape, &mut rng(seed));
    let wv = g.input(w);
    let p = g.mul(v, wv).unwrap();
    g.sum(p)
}
