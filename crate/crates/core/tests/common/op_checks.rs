//! Central-difference checks of every differentiable graph operation.

use ntlcut::autodiff::{NormKind, NormStats, PadMode, Tensor};

use super::{gradcheck, nonzero_tensor, random_tensor, rng, weighted_sum, GradReport};

/// Runs every operation check and returns (operation, report) pairs.
pub fn all() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    grad_elementwise(&mut out);
    grad_conv2d_variants(&mut out);
    grad_pad_and_upsample(&mut out);
    grad_conv_transpose(&mut out);
    grad_norm_batch_and_instance(&mut out);
    grad_linear_l2norm_gather(&mut out);
    grad_patch_nce(&mut out);
    out
}

fn grad_elementwise(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(10);
    let a = nonzero_tensor(&[2, 3], &mut r);
    let b = nonzero_tensor(&[2, 3], &mut r);
    out.push((
        "add_sub_mul_scale_square_tanh_mean_sum",
        gradcheck(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let sc = g.scale(m, 1.7);
            let c = g.add_scalar(sc, 0.3);
            let q = g.square(c);
            let t = g.tanh(q);
            let mn = g.mean(t);
            let w = weighted_sum(g, m, 1);
            g.add(mn, w).unwrap()
        }),
    ));
    out.push((
        "relu_leaky_relu",
        gradcheck(&[a], |g, v| {
            let r1 = g.relu(v[0]);
            let r2 = g.leaky_relu(v[0], 0.2);
            let s = g.add(r1, r2).unwrap();
            weighted_sum(g, s, 2)
        }),
    ));
}

fn grad_conv2d_variants(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(11);
    for &(stride, pad, mode, k) in &[
        (1, 1, PadMode::Zero, 3),
        (2, 1, PadMode::Zero, 4),
        (1, 2, PadMode::Reflect, 3),
        (2, 1, PadMode::Reflect, 3),
    ] {
        let x = random_tensor(&[2, 2, 6, 5], &mut r);
        let w = random_tensor(&[3, 2, k, k], &mut r);
        let b = random_tensor(&[3], &mut r);
        out.push((
            "conv2d_variants",
            gradcheck(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad, mode).unwrap();
                weighted_sum(g, y, 3)
            }),
        ));
    }
}

fn grad_pad_and_upsample(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(12);
    let x = random_tensor(&[1, 2, 4, 3], &mut r);
    out.push((
        "pad_and_upsample",
        gradcheck(&[x], |g, v| {
            let p = g.pad2d(v[0], 2, PadMode::Reflect).unwrap();
            let z = g.pad2d(p, 1, PadMode::Zero).unwrap();
            let u = g.upsample_nearest2x(z).unwrap();
            weighted_sum(g, u, 4)
        }),
    ));
}

fn grad_conv_transpose(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(13);
    let x = random_tensor(&[2, 3, 3, 4], &mut r);
    let w = random_tensor(&[3, 2, 3, 3], &mut r);
    let b = random_tensor(&[2], &mut r);
    out.push((
        "conv_transpose",
        gradcheck(&[x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
            weighted_sum(g, y, 5)
        }),
    ));
}

fn grad_norm_batch_and_instance(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(14);
    for kind in [NormKind::Batch, NormKind::Instance] {
        let x = random_tensor(&[2, 3, 3, 3], &mut r);
        let gm = random_tensor(&[3], &mut r);
        let bt = random_tensor(&[3], &mut r);
        out.push((
            "norm_batch_and_instance",
            gradcheck(&[x, gm, bt], |g, v| {
                let (y, _) = g.norm(v[0], v[1], v[2], kind, NormStats::Batch).unwrap();
                weighted_sum(g, y, 6)
            }),
        ));
    }
    let x = random_tensor(&[2, 2, 2, 2], &mut r);
    let (mean, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
    out.push((
        "norm_fixed_stats",
        gradcheck(
            &[x, Tensor::full(&[2], 1.3), Tensor::full(&[2], 0.1)],
            |g, v| {
                let (y, _) = g
                    .norm(
                        v[0],
                        v[1],
                        v[2],
                        NormKind::Batch,
                        NormStats::Fixed {
                            mean: &mean,
                            var: &var,
                        },
                    )
                    .unwrap();
                weighted_sum(g, y, 7)
            },
        ),
    ));
}

fn grad_linear_l2norm_gather(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(15);
    let x = random_tensor(&[2, 4, 3, 3], &mut r);
    let w1 = random_tensor(&[5, 4], &mut r);
    let b1 = random_tensor(&[5], &mut r);
    let idx = [0usize, 4, 8, 2];
    out.push((
        "linear_l2norm_gather",
        gradcheck(&[x, w1, b1], |g, v| {
            let rows = g.gather_positions(v[0], &idx).unwrap();
            let h = g.linear(rows, v[1], Some(v[2])).unwrap();
            let n = g.l2_normalize(h).unwrap();
            weighted_sum(g, n, 8)
        }),
    ));
}

fn grad_patch_nce(out: &mut Vec<(&'static str, GradReport)>) {
    let mut r = rng(16);
    let q = random_tensor(&[2 * 5, 4], &mut r);
    let k = random_tensor(&[2 * 5, 4], &mut r);
    out.push((
        "patch_nce",
        gradcheck(&[q, k], |g, v| {
            let qn = g.l2_normalize(v[0]).unwrap();
            let kn = g.l2_normalize(v[1]).unwrap();
            g.patch_nce(qn, kn, 2, 0.5).unwrap()
        }),
    ));
}
