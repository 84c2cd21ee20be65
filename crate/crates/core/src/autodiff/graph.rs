use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvShape, ConvTShape};
use super::nce;
use super::norm::{self, NormKind, NORM_EPS};
use super::{AutogradError, ParamId, ParamStore, Scalar, Tensor};

type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    /// Mirror about the edge pixel without repeating it.
    Reflect,
}

/// Where a normalization layer takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Computed from the input (training mode).
    Batch,
    /// Supplied running estimates (evaluation mode).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Pad2d {
        x: Var,
        pad: usize,
        mode: PadMode,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    },
    UpsampleNearest2x(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        from_input: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    PatchNce {
        q: Var,
        k: Var,
        batch: usize,
        per_image: usize,
        tau: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of tensor operations supporting one reverse-mode sweep.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order of the graph.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<(String, usize), Var>,
    frozen: HashSet<String>,
    zero_norm_rows: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            zero_norm_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop parameters of stores with this tag from receiving gradients.
    pub fn freeze(&mut self, tag: &str) {
        self.frozen.insert(tag.to_string());
    }

    pub fn unfreeze(&mut self, tag: &str) {
        self.frozen.remove(tag);
    }

    /// Leaf for a stored parameter. Repeated uses share one leaf, so the
    /// gradients of all uses are summed.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.tag().to_string(), id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let trainable = !self.frozen.contains(store.tag());
        let v = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(key, v);
        v
    }

    /// Constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients for every parameter of `store`, in id order; `None` for
    /// parameters that were not used or are frozen.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.tag().to_string(), i))
                    .and_then(|v| self.nodes[v.0].grad.clone())
            })
            .collect()
    }

    /// Rows that [`Graph::l2_normalize`] had to zero because their norm vanished.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutogradError::Shape(format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        self.push(t, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn pad2d(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(AutogradError::Shape(format!(
                "reflect pad {pad} on {h}x{w}"
            )));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ph * pw];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for oy in 0..ph {
                let Some(iy) = pad_index(oy, pad, h, mode) else {
                    continue;
                };
                for ox in 0..pw {
                    if let Some(ix) = pad_index(ox, pad, w, mode) {
                        d[oy * pw + ox] = s[iy * w + ix];
                    }
                }
            }
        }
        let t = Tensor::new(&[n, c, ph, pw], out)?;
        Ok(self.push(t, Op::Pad2d { x, pad, mode }, &[x]))
    }

    /// Cross-correlation of `x` [N,Ci,H,W] with `w` [Co,Ci,k,k]. Padding
    /// is applied with `mode` before the convolution.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        match (mode, padding) {
            (_, 0) => self.conv2d_raw(x, w, b, stride, 0),
            (PadMode::Zero, p) => self.conv2d_raw(x, w, b, stride, p),
            (PadMode::Reflect, p) => {
                let xp = self.pad2d(x, p, PadMode::Reflect)?;
                self.conv2d_raw(xp, w, b, stride, 0)
            }
        }
    }

    fn conv_shape(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<ConvShape> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c_in || kh != kw {
            return Err(AutogradError::Shape(format!(
                "conv weight {:?} for input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(AutogradError::Shape(format!(
                "kernel {kh} stride {stride} on {h}x{wd} (pad {pad})"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(AutogradError::Shape(format!(
                    "conv bias {:?}",
                    self.value(b).shape()
                )));
            }
        }
        Ok(ConvShape {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            pad,
        })
    }

    fn conv2d_raw(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let s = self.conv_shape(x, w, b, stride, pad)?;
        let (oh, ow) = s.out_hw();
        let y = conv::conv2d_forward(
            &s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[s.n, s.c_out, oh, ow], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    fn convt_shape(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<ConvTShape> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc, c_out, kh, kw) = self.value(w).dims4()?;
        if wc != c_in || kh != kw || stride == 0 || output_padding >= stride {
            return Err(AutogradError::Shape(format!(
                "transposed conv weight {:?} (stride {stride}, output padding {output_padding}) for input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if (h - 1) * stride + kh + output_padding <= 2 * pad {
            return Err(AutogradError::Shape(
                "transposed conv output would be empty".into(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(AutogradError::Shape(format!(
                    "conv bias {:?}",
                    self.value(b).shape()
                )));
            }
        }
        Ok(ConvTShape {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            pad,
            output_padding,
        })
    }

    /// Fractionally strided convolution; `w` is [Ci,Co,k,k] and the output
    /// side is `(H-1)*stride - 2*pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let s = self.convt_shape(x, w, b, stride, pad, output_padding)?;
        let (oh, ow) = s.out_hw();
        let y = conv::conv_transpose2d_forward(
            &s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[s.n, s.c_out, oh, ow], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
                output_padding,
            },
            &inputs,
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[plane * 4 * h * w + y * 2 * w + xx] =
                        src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::UpsampleNearest2x(x), &[x]))
    }

    /// Per-channel standardization followed by the affine `gamma`, `beta`.
    /// With [`NormStats::Batch`] the statistics used are returned so callers
    /// can maintain running estimates.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(AutogradError::Shape(format!(
                "norm affine for {c} channels"
            )));
        }
        let hw = h * w;
        let (mean, var, from_input) = match (stats, kind) {
            (NormStats::Fixed { mean, var }, NormKind::Batch) => {
                if mean.len() != c || var.len() != c {
                    return Err(AutogradError::Shape("running statistics length".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
            _ => {
                let (mean, var, count) = norm::moments(self.value(x).data(), kind, (n, c, hw));
                if count < 2 {
                    return Err(AutogradError::DegenerateBatch(count));
                }
                (mean, var, true)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let gi = norm::group_of(kind, i, ch, c);
                let (m, s) = (T::of(mean[gi]), T::of(invstd[gi]));
                let base = (i * c + ch) * hw;
                for (o, &v) in out[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                    *o = g[ch] * ((v - m) * s) + bt[ch];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let used = from_input.then(|| (mean.clone(), var));
        let v = self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                mean,
                invstd,
                from_input,
            },
            &[x, gamma, beta],
        );
        Ok((v, used))
    }

    /// `x` [M,K] · `w`ᵀ ([N,K]) + `b` [N].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (n, wk) = self.value(w).dims2()?;
        if wk != k {
            return Err(AutogradError::Shape(format!(
                "linear {m}x{k} with weight {n}x{wk}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            1,
            k,
            T::zero(),
            &mut out,
            n,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n] {
                return Err(AutogradError::Shape(format!(
                    "linear bias {:?}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    /// Scale each slice along the last axis to unit L2 norm. Slices with norm
    /// at most 1e-12 become zero and are counted in [`Graph::zero_norm_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| AutogradError::Shape("scalar".into()))?;
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        let mut zeroed = 0;
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
            if n <= 1e-12 {
                row.iter_mut().for_each(|a| *a = T::zero());
                norms.push(T::zero());
                zeroed += 1;
            } else {
                let inv = T::of(1.0 / n);
                row.iter_mut().for_each(|a| *a *= inv);
                norms.push(T::of(n));
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        self.zero_norm_rows += zeroed;
        Ok(self.push(t, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Rows `x[b, :, idx[p]]` of an NCHW tensor as a [B·P, C] matrix, ordered
    /// by (b, p). `idx` holds flattened `y*W + x` positions.
    pub fn gather_positions(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= h * w) {
            return Err(AutogradError::Shape(format!(
                "position {bad} outside {h}x{w}"
            )));
        }
        let src = self.value(x).data();
        let p = idx.len();
        let mut out = vec![T::zero(); n * p * c];
        for b in 0..n {
            for (pi, &pos) in idx.iter().enumerate() {
                let row = &mut out[(b * p + pi) * c..(b * p + pi + 1) * c];
                for (ch, o) in row.iter_mut().enumerate() {
                    *o = src[(b * c + ch) * h * w + pos];
                }
            }
        }
        let t = Tensor::new(&[n * p, c], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean patchwise InfoNCE of queries `q` against keys `k`, both
    /// [batch·per_image, D] with rows grouped by image.
    pub fn patch_nce(&mut self, q: Var, k: Var, batch: usize, tau: T) -> Result<Var> {
        self.same_shape(q, k)?;
        let (rows, dim) = self.value(q).dims2()?;
        if batch == 0 || rows % batch != 0 {
            return Err(AutogradError::Shape(format!(
                "{rows} rows for batch {batch}"
            )));
        }
        let per_image = rows / batch;
        if per_image < 2 {
            return Err(AutogradError::DegenerateSamples(per_image));
        }
        if !(tau > T::zero()) {
            return Err(AutogradError::Shape(format!("temperature {tau:?}")));
        }
        let f = nce::forward(
            self.value(q).data(),
            self.value(k).data(),
            batch,
            per_image,
            dim,
            tau,
        );
        let t = Tensor::scalar(f.loss);
        Ok(self.push(
            t,
            Op::PatchNce {
                q,
                k,
                batch,
                per_image,
                tau,
                probs: f.probs,
            },
            &[q, k],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`; leaf gradients are stored on
    /// the leaves and summed over every path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutogradError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].grad = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<T>| -> Result<()> {
            if v.0 >= id {
                return Err(AutogradError::GraphCycle(id));
            }
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(delta),
            }
            Ok(())
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec())?;
                acc(*b, g.to_vec())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec())?;
                acc(*b, g.iter().map(|&v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect())?;
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect())?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&d| d * *s).collect())?,
            Op::AddScalar(x) => acc(*x, g.to_vec())?,
            Op::Square(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(&d, &v)| d * (v + v)).collect(),
            )?,
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()])?,
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![g[0] / T::of(n as f64); n])?
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            )?,
            Op::LeakyRelu(x, s) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { d * *s })
                    .collect(),
            )?,
            Op::Tanh(x) => acc(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect(),
            )?,
            Op::Pad2d { x, pad, mode } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..ph {
                        let Some(iy) = pad_index(oy, *pad, h, *mode) else {
                            continue;
                        };
                        for ox in 0..pw {
                            if let Some(ix) = pad_index(ox, *pad, w, *mode) {
                                dx[plane * h * w + iy * w + ix] +=
                                    g[plane * ph * pw + oy * pw + ox];
                            }
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let s = self.conv_shape(*x, *w, *b, *stride, *pad)?;
                let need = (needs(*x), needs(*w), b.map(needs).unwrap_or(false));
                let gr = conv::conv2d_backward(&s, val(*x), val(*w), g, need);
                if let Some(dx) = gr.dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = gr.dw {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, gr.db) {
                    acc(*b, db)?;
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
                output_padding,
            } => {
                let s = self.convt_shape(*x, *w, *b, *stride, *pad, *output_padding)?;
                let need = (needs(*x), needs(*w), b.map(needs).unwrap_or(false));
                let gr = conv::conv_transpose2d_backward(&s, val(*x), val(*w), g, need);
                if let Some(dx) = gr.dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = gr.dw {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, gr.db) {
                    acc(*b, db)?;
                }
            }
            Op::UpsampleNearest2x(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[plane * h * w + (y / 2) * w + xx / 2] +=
                                g[plane * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                mean,
                invstd,
                from_input,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let hw = h * w;
                let xs = val(*x);
                let gam = val(*gamma);
                let groups = norm::n_groups(*kind, n, c);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                // Per-group sums of dxhat and dxhat*xhat.
                let mut s1 = vec![0.0f64; groups];
                let mut s2 = vec![0.0f64; groups];
                for i in 0..n {
                    for ch in 0..c {
                        let gi = norm::group_of(*kind, i, ch, c);
                        let base = (i * c + ch) * hw;
                        let (m, is) = (mean[gi], invstd[gi]);
                        for j in base..base + hw {
                            let xhat = (xs[j].f64() - m) * is;
                            let d = g[j].f64();
                            dgamma[ch] += T::of(d * xhat);
                            dbeta[ch] += g[j];
                            s1[gi] += d * gam[ch].f64();
                            s2[gi] += d * gam[ch].f64() * xhat;
                        }
                    }
                }
                if needs(*x) {
                    let count = match kind {
                        NormKind::Batch => (n * hw) as f64,
                        NormKind::Instance => hw as f64,
                    };
                    let mut dx = vec![T::zero(); xs.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let gi = norm::group_of(*kind, i, ch, c);
                            let base = (i * c + ch) * hw;
                            let (m, is) = (mean[gi], invstd[gi]);
                            let gm = gam[ch].f64();
                            for j in base..base + hw {
                                let dxhat = g[j].f64() * gm;
                                dx[j] = T::of(if *from_input {
                                    let xhat = (xs[j].f64() - m) * is;
                                    is * (dxhat - s1[gi] / count - xhat * s2[gi] / count)
                                } else {
                                    is * dxhat
                                });
                            }
                        }
                    }
                    acc(*x, dx)?;
                }
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.nodes[x.0].value.dims2()?;
                let (n, _) = self.nodes[w.0].value.dims2()?;
                if needs(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n,
                        1,
                        val(*w),
                        k,
                        1,
                        T::zero(),
                        &mut dx,
                        k,
                        1,
                    );
                    acc(*x, dx)?;
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        1,
                        n,
                        val(*x),
                        k,
                        1,
                        T::zero(),
                        &mut dw,
                        k,
                        1,
                    );
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc(*b, db)?;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *self.nodes[x.0].value.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm == T::zero() {
                        continue;
                    }
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - y[j] * dot) / nrm;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Gather { x, idx } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let p = idx.len();
                let mut dx = vec![T::zero(); n * c * h * w];
                for b in 0..n {
                    for (pi, &pos) in idx.iter().enumerate() {
                        for ch in 0..c {
                            dx[(b * c + ch) * h * w + pos] += g[(b * p + pi) * c + ch];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::PatchNce {
                q,
                k,
                batch,
                per_image,
                tau,
                probs,
            } => {
                let (_, dim) = self.nodes[q.0].value.dims2()?;
                let (dq, dk) =
                    nce::backward(val(*q), val(*k), probs, *batch, *per_image, dim, *tau, g[0]);
                acc(*q, dq)?;
                acc(*k, dk)?;
            }
        }
        Ok(())
    }
}

/// Source index of padded coordinate `o` along an axis of length `n`.
fn pad_index(o: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let i = o as isize - pad as isize;
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            Some(r as usize)
        }
    }
}
