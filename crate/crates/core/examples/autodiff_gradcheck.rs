//! A two-layer conv net on the reverse-mode graph, checked against central
//! differences in double precision.

use ntlcut::autodiff::{Graph, PadMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(
    x: &Tensor<f64>,
    w1: &Tensor<f64>,
    w2: &Tensor<f64>,
) -> (
    Graph<f64>,
    [ntlcut::autodiff::Var; 3],
    ntlcut::autodiff::Var,
) {
    let mut g = Graph::new();
    let (xv, a, b) = (
        g.leaf(x.clone(), true),
        g.leaf(w1.clone(), true),
        g.leaf(w2.clone(), true),
    );
    let h = g.conv2d(xv, a, None, 1, 1, PadMode::Reflect).unwrap();
    let h = g.tanh(h);
    let y = g.conv2d(h, b, None, 2, 1, PadMode::Zero).unwrap();
    let sq = g.square(y);
    let l = g.mean(sq);
    (g, [xv, a, b], l)
}

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (x, w1, w2) = (
        random(&[2, 1, 8, 8], &mut r),
        random(&[3, 1, 3, 3], &mut r),
        random(&[2, 3, 4, 4], &mut r),
    );
    let (mut g, vars, l) = loss(&x, &w1, &w2);
    g.backward(l).unwrap();
    println!("loss {:.6}", g.value(l).item());

    let h = 1e-6;
    let inputs = [&x, &w1, &w2];
    for (k, name) in ["input", "conv1", "conv2"].iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        let mut worst = 0.0f64;
        for j in 0..inputs[k].numel() {
            let mut p: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
            let mut m = p.clone();
            p[k].data_mut()[j] += h;
            m[k].data_mut()[j] -= h;
            let (gp, _, lp) = loss(&p[0], &p[1], &p[2]);
            let (gm, _, lm) = loss(&m[0], &m[1], &m[2]);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            worst = worst.max(
                (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-8),
            );
        }
        println!(
            "{name:6} {:4} values, max relative error {worst:.2e}",
            inputs[k].numel()
        );
    }
}
