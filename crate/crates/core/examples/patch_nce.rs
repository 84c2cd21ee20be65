//! PatchNCE on hand-made embeddings: how the loss reacts to the temperature
//! and to how well queries line up with their positives.

use ntlcut::autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nce(q: &Tensor<f64>, k: &Tensor<f64>, tau: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
    let (qn, kn) = (g.l2_normalize(qv).unwrap(), g.l2_normalize(kv).unwrap());
    let l = g.patch_nce(qn, kn, 1, tau).unwrap();
    g.value(l).item()
}

fn main() {
    let (p, d) = (64, 32);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let keys: Vec<f64> = (0..p * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let k = Tensor::new(&[p, d], keys.clone()).unwrap();
    println!("{p} patches, log(P) = {:.4}", (p as f64).ln());
    println!("noise  tau=0.07  tau=0.2  tau=1.0");
    for noise in [0.0, 0.5, 1.0, 3.0] {
        let q: Vec<f64> = keys
            .iter()
            .map(|v| v + noise * r.gen_range(-1.0..1.0))
            .collect();
        let q = Tensor::new(&[p, d], q).unwrap();
        println!(
            "{noise:5.1} {:9.4} {:8.4} {:8.4}",
            nce(&q, &k, 0.07),
            nce(&q, &k, 0.2),
            nce(&q, &k, 1.0)
        );
    }
    let same = Tensor::full(&[p, d], 1.0);
    println!("identical embeddings: {:.4}", nce(&same, &same, 0.07));
}
