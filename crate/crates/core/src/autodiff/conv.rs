//! Convolution kernels (im2col + GEMM), shared by the graph ops.
//!
//! Every kernel loops over the batch in index order or writes disjoint
//! per-sample slices, so results do not depend on the thread count.

use rayon::prelude::*;

use super::Scalar;

/// Gather geometry: an image of `channels`×`in_h`×`in_w` read through a
/// `k_h`×`k_w` window at `out_h`×`out_w` positions, position (oy, ox) reading
/// pixel (oy*stride - pad + ki, ox*stride - pad + kj). Out-of-range pixels are
/// zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source index for output coordinate `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + k).checked_sub(self.pad)?;
        (v < limit).then_some(v)
    }
}

pub(crate) fn im2col<T: Scalar>(src: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.src(oy, ki, g.in_h) else {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let srow = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    if g.stride == 1 && g.pad == 0 {
                        drow.copy_from_slice(&srow[kj..kj + g.out_w]);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        *d = match g.src(ox, kj, g.in_w) {
                            Some(ix) => srow[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto the image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geom, dst: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ki, g.in_h) else {
                        continue;
                    };
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let prow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, &v) in srow.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.in_w) {
                            prow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn geom(&self) -> Geom {
        let (out_h, out_w) = self.out_hw();
        Geom {
            channels: self.c_in,
            in_h: self.h,
            in_w: self.w,
            k_h: self.k,
            k_w: self.k,
            stride: self.stride,
            pad: self.pad,
            out_h,
            out_w,
        }
    }
}

/// y[n] = W · im2col(x[n]) + b
pub(crate) fn conv2d_forward<T: Scalar>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let g = s.geom();
    let (kk, p) = (g.rows(), g.positions());
    let in_sz = s.c_in * s.h * s.w;
    let mut out = vec![T::zero(); s.n * s.c_out * p];
    out.par_chunks_mut(s.c_out * p)
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::zero(); kk * p];
            im2col(&x[n * in_sz..(n + 1) * in_sz], &g, &mut cols);
            T::gemm(
                s.c_out,
                kk,
                p,
                T::one(),
                w,
                kk,
                1,
                &cols,
                p,
                1,
                T::zero(),
                y,
                p,
                1,
            );
            if let Some(b) = b {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = s.geom();
    let (kk, p) = (g.rows(), g.positions());
    let in_sz = s.c_in * s.h * s.w;
    let out_sz = s.c_out * p;
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
            let dw = need.1.then(|| {
                let mut cols = vec![T::zero(); kk * p];
                im2col(&x[n * in_sz..(n + 1) * in_sz], &g, &mut cols);
                let mut dw = vec![T::zero(); s.c_out * kk];
                // dW = dY (Co×P) · cols^T (P×K)
                T::gemm(
                    s.c_out,
                    p,
                    kk,
                    T::one(),
                    dyn_,
                    p,
                    1,
                    &cols,
                    1,
                    p,
                    T::zero(),
                    &mut dw,
                    kk,
                    1,
                );
                dw
            });
            let dx = need.0.then(|| {
                let mut dcols = vec![T::zero(); kk * p];
                // dcols = W^T (K×Co) · dY (Co×P)
                T::gemm(
                    kk,
                    s.c_out,
                    p,
                    T::one(),
                    w,
                    1,
                    kk,
                    dyn_,
                    p,
                    1,
                    T::zero(),
                    &mut dcols,
                    p,
                    1,
                );
                let mut dx = vec![T::zero(); in_sz];
                col2im(&dcols, &g, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();
    let mut out = ConvGrads {
        dx: None,
        dw: None,
        db: None,
    };
    if need.0 {
        let mut dx = Vec::with_capacity(s.n * in_sz);
        per_sample
            .iter()
            .for_each(|(d, _)| dx.extend_from_slice(d.as_ref().unwrap()));
        out.dx = Some(dx);
    }
    if need.1 {
        let mut dw = vec![T::zero(); s.c_out * kk];
        for (_, d) in &per_sample {
            dw.iter_mut()
                .zip(d.as_ref().unwrap())
                .for_each(|(a, &b)| *a += b);
        }
        out.dw = Some(dw);
    }
    if need.2 {
        out.db = Some(channel_sums(dy, s.n, s.c_out, p));
    }
    out
}

pub(crate) fn channel_sums<T: Scalar>(dy: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (i * c + co) * p;
            *acc += dy[base..base + p].iter().copied().sum::<T>();
        }
    }
    db
}

/// Transposed convolution shape; weight layout is [c_in, c_out, k, k].
pub(crate) struct ConvTShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl ConvTShape {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.stride + self.k + self.output_padding - 2 * self.pad,
            (self.w - 1) * self.stride + self.k + self.output_padding - 2 * self.pad,
        )
    }

    /// Output image viewed through the forward-conv gather at input positions.
    fn geom(&self) -> Geom {
        let (oh, ow) = self.out_hw();
        Geom {
            channels: self.c_out,
            in_h: oh,
            in_w: ow,
            k_h: self.k,
            k_w: self.k,
            stride: self.stride,
            pad: self.pad,
            out_h: self.h,
            out_w: self.w,
        }
    }
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    s: &ConvTShape,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let g = s.geom();
    let (kk, p) = (g.rows(), g.positions());
    let (oh, ow) = s.out_hw();
    let in_sz = s.c_in * p;
    let out_sz = s.c_out * oh * ow;
    let mut out = vec![T::zero(); s.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(n, y)| {
        let mut cols = vec![T::zero(); kk * p];
        // cols (Co*k*k × HW) = W^T · x[n]
        T::gemm(
            kk,
            s.c_in,
            p,
            T::one(),
            w,
            1,
            kk,
            &x[n * in_sz..(n + 1) * in_sz],
            p,
            1,
            T::zero(),
            &mut cols,
            p,
            1,
        );
        col2im(&cols, &g, y);
        if let Some(b) = b {
            for (co, plane) in y.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    s: &ConvTShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = s.geom();
    let (kk, p) = (g.rows(), g.positions());
    let (oh, ow) = s.out_hw();
    let in_sz = s.c_in * p;
    let out_sz = s.c_out * oh * ow;
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let mut dcols = vec![T::zero(); kk * p];
            im2col(&dy[n * out_sz..(n + 1) * out_sz], &g, &mut dcols);
            let dx = need.0.then(|| {
                let mut dx = vec![T::zero(); in_sz];
                // dx = W (Ci × K) · dcols (K × P)
                T::gemm(
                    s.c_in,
                    kk,
                    p,
                    T::one(),
                    w,
                    kk,
                    1,
                    &dcols,
                    p,
                    1,
                    T::zero(),
                    &mut dx,
                    p,
                    1,
                );
                dx
            });
            let dw = need.1.then(|| {
                let mut dw = vec![T::zero(); s.c_in * kk];
                // dW = x (Ci × P) · dcols^T (P × K)
                T::gemm(
                    s.c_in,
                    p,
                    kk,
                    T::one(),
                    &x[n * in_sz..(n + 1) * in_sz],
                    p,
                    1,
                    &dcols,
                    1,
                    p,
                    T::zero(),
                    &mut dw,
                    kk,
                    1,
                );
                dw
            });
            (dx, dw)
        })
        .collect();
    let mut out = ConvGrads {
        dx: None,
        dw: None,
        db: None,
    };
    if need.0 {
        let mut dx = Vec::with_capacity(s.n * in_sz);
        per_sample
            .iter()
            .for_each(|(d, _)| dx.extend_from_slice(d.as_ref().unwrap()));
        out.dx = Some(dx);
    }
    if need.1 {
        let mut dw = vec![T::zero(); s.c_in * kk];
        for (_, d) in &per_sample {
            dw.iter_mut()
                .zip(d.as_ref().unwrap())
                .for_each(|(a, &b)| *a += b);
        }
        out.dw = Some(dw);
    }
    if need.2 {
        out.db = Some(channel_sums(dy, s.n, s.c_out, oh * ow));
    }
    out
}
