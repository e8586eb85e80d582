//! A small tape-based reverse-mode differentiation engine.
//!
//! Every forward op appends a node holding its value; `backward` walks the
//! tape in reverse. The op set is exactly what the re-identification networks
//! need: strided convolutions, group normalization, (leaky) ReLU, sigmoid, the channel-broadcast Hadamard
//! product, region average pooling, linear layers, and scalar loss nodes whose
//! local gradients are computed by the loss functions themselves.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffers for every sample, kept only when the kernel needs a gradient.
        cols: Option<Vec<f64>>,
    },
    LeakyRelu(Var, f64),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// Normalized input and per-(sample, group) inverse std.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row-wise `x · √d / ‖x‖` of `[N, d]`, keeping `1 / ‖x‖` per row.
    RowNormalize(Var, Vec<f64>),
    Sigmoid(Var),
    Attend {
        f: Var,
        a: Var,
    },
    RegionMean {
        x: Var,
        channels: Range<usize>,
        rows: Range<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Scalar node with precomputed local gradients w.r.t. each input.
    Scalar { inputs: Vec<(Var, Tensor)> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients keyed by parameter name; parameters the loss never touched get zeros.
    pub fn by_param(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

const GN_EPS: f64 = 1e-5;
const ROW_NORM_FLOOR: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // saturate inside the open interval
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (used for gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d expects NCHW input and OCKK kernel, got {xs:?} / {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return shape_err(format!("conv2d input has {c} channels, kernel expects {wc}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err("conv2d bias must have one entry per output channel");
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return shape_err("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let keep_cols = self.rg(w);
        let mut all_cols = if keep_cols { vec![0.0; n * ckk * hw] } else { vec![] };
        let mut scratch = vec![0.0; ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let cols: &mut [f64] = if keep_cols {
                &mut all_cols[s * ckk * hw..(s + 1) * ckk * hw]
            } else {
                &mut scratch
            };
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo, cols);
            let dst = &mut out[s * o * hw..(s + 1) * o * hw];
            gemm(o, ckk, hw, wv, (ckk as isize, 1), cols, (hw as isize, 1), 0.0, dst, (hw as isize, 1));
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for (oc, &bias) in bv.iter().enumerate() {
                    let base = (s * o + oc) * hw;
                    for v in &mut out[base..base + hw] {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: keep_cols.then_some(all_cols),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `max(x, slope·x)` for `0 <= slope < 1`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    /// Per-sample group normalization of `[N, C, H, W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || groups == 0 || xs[1] % groups != 0 {
            return shape_err(format!("group_norm needs [N, C, H, W] with C divisible by {groups}, got {xs:?}"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err("group_norm affine parameters must have one entry per channel");
        }
        let m = c / groups * hw;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * groups];
        for s in 0..n {
            for gi in 0..groups {
                let base = (s * c + gi * (c / groups)) * hw;
                let seg = &xv[base..base + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + GN_EPS).sqrt();
                inv_std[s * groups + gi] = inv;
                for (k, v) in seg.iter().enumerate() {
                    let ch = gi * (c / groups) + k / hw;
                    let xh = (v - mean) * inv;
                    xhat[base + k] = xh;
                    out[base + k] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rescale every row of `[N, d]` to norm `√d`.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return shape_err(format!("row_normalize needs [N, d], got {xs:?}"));
        }
        let d = xs[1];
        let scale = (d as f64).sqrt();
        let xv = self.value(x).data();
        let inv: Vec<f64> = xv
            .chunks(d)
            .map(|r| 1.0 / r.iter().map(|v| v * v).sum::<f64>().sqrt().max(ROW_NORM_FLOOR))
            .collect();
        let out = xv.chunks(d).zip(&inv).flat_map(|(r, i)| r.iter().map(move |v| v * i * scale)).collect();
        let rg = self.rg(x);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::RowNormalize(x, inv), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// `f ⊗ a` with the single-channel map `a` broadcast across the channels of `f`.
    pub fn attend(&mut self, f: Var, a: Var) -> Result<Var> {
        let fs = self.value(f).shape().to_vec();
        let as_ = self.value(a).shape().to_vec();
        if fs.len() != 4 || as_.len() != 4 || as_[1] != 1 || fs[0] != as_[0] || fs[2..] != as_[2..] {
            return shape_err(format!("attention map {as_:?} does not match feature map {fs:?}"));
        }
        let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
        let fv = self.value(f).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; fv.len()];
        for s in 0..n {
            let att = &av[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = fv[base + p] * att[p];
                }
            }
        }
        let rg = self.rg(f) || self.rg(a);
        let value = Tensor::new(fs, out)?;
        Ok(self.push(value, Op::Attend { f, a }, rg))
    }

    /// Average over `rows` (all columns) for the channel range `channels`: `[N,C,H,W] -> [N, |channels|]`.
    pub fn region_mean(&mut self, x: Var, channels: Range<usize>, rows: Range<usize>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || channels.end > xs[1] || rows.end > xs[2] || channels.is_empty() || rows.is_empty() {
            return shape_err(format!("region {channels:?}x{rows:?} outside feature map {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let count = (rows.len() * w) as f64;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * channels.len());
        for s in 0..n {
            for ch in channels.clone() {
                let base = (s * c + ch) * h * w;
                let sum: f64 = xv[base + rows.start * w..base + rows.end * w].iter().sum();
                out.push(sum / count);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, channels.len()], out)?;
        Ok(self.push(value, Op::RegionMean { x, channels, rows }, rg))
    }

    /// `y = x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            0.0,
            &mut out,
            (dout as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return shape_err("linear bias length mismatch");
            }
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// A scalar node whose value and input gradients were computed externally.
    pub fn scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).shape() != g.shape() {
                return shape_err("scalar node gradient shape differs from its input");
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs }, rg))
    }

    /// `Σ w·v` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        debug_assert!(terms.iter().all(|(v, _)| self.value(*v).len() == 1), "weighted_sum takes scalars");
        let value: f64 = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::WeightedSum(terms), rg)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x).data();
                    let g: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                        .collect();
                    accumulate(&mut grads, *x, g, self);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let xs = self.value(*x).shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let cg = c / groups;
                    let m = cg * hw;
                    let go = gout.data();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                dgamma[ch] += go[base + p] * xhat[base + p];
                                dbeta[ch] += go[base + p];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let mut gx = vec![0.0; go.len()];
                        for s in 0..n {
                            for gi in 0..*groups {
                                let base = (s * c + gi * cg) * hw;
                                let (mut mean_d, mut mean_dx) = (0.0, 0.0);
                                for k in 0..m {
                                    let d = go[base + k] * gv[gi * cg + k / hw];
                                    mean_d += d;
                                    mean_dx += d * xhat[base + k];
                                }
                                mean_d /= m as f64;
                                mean_dx /= m as f64;
                                let inv = inv_std[s * groups + gi];
                                for k in 0..m {
                                    let d = go[base + k] * gv[gi * cg + k / hw];
                                    gx[base + k] = inv * (d - mean_d - xhat[base + k] * mean_dx);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, gx, self);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma, self);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, dbeta, self);
                    }
                }
                Op::RowNormalize(x, inv) => {
                    let d = self.value(*x).shape()[1];
                    let scale = (d as f64).sqrt();
                    let mut gx = Vec::with_capacity(gout.len());
                    for ((xr, gr), i) in self.value(*x).data().chunks(d).zip(gout.data().chunks(d)).zip(inv) {
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() * i * i;
                        gx.extend(xr.iter().zip(gr).map(|(a, b)| scale * i * (b - a * dot)));
                    }
                    accumulate(&mut grads, *x, gx, self);
                }
                Op::Sigmoid(x) => {
                    let g: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, g, self);
                }
                Op::Attend { f, a } => {
                    let fs = self.value(*f).shape();
                    let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
                    let fv = self.value(*f).data();
                    let av = self.value(*a).data();
                    let go = gout.data();
                    if self.rg(*f) {
                        let mut gf = vec![0.0; fv.len()];
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * hw;
                                for p in 0..hw {
                                    gf[base + p] = go[base + p] * av[s * hw + p];
                                }
                            }
                        }
                        accumulate(&mut grads, *f, gf, self);
                    }
                    if self.rg(*a) {
                        let mut ga = vec![0.0; av.len()];
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * hw;
                                for p in 0..hw {
                                    ga[s * hw + p] += go[base + p] * fv[base + p];
                                }
                            }
                        }
                        accumulate(&mut grads, *a, ga, self);
                    }
                }
                Op::RegionMean { x, channels, rows } => {
                    let xs = self.value(*x).shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let count = (rows.len() * w) as f64;
                    let mut gx = vec![0.0; n * c * h * w];
                    let go = gout.data();
                    for s in 0..n {
                        for (k, ch) in channels.clone().enumerate() {
                            let g = go[s * channels.len() + k] / count;
                            let base = (s * c + ch) * h * w;
                            for v in &mut gx[base + rows.start * w..base + rows.end * w] {
                                *v = g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx, self);
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let dout = self.value(*w).shape()[0];
                    let go = gout.data();
                    if self.rg(*x) {
                        let mut gx = vec![0.0; n * din];
                        gemm(n, dout, din, go, (dout as isize, 1), self.value(*w).data(), (din as isize, 1), 0.0, &mut gx, (din as isize, 1));
                        accumulate(&mut grads, *x, gx, self);
                    }
                    if self.rg(*w) {
                        let mut gw = vec![0.0; dout * din];
                        gemm(dout, n, din, go, (1, dout as isize), self.value(*x).data(), (din as isize, 1), 0.0, &mut gw, (din as isize, 1));
                        accumulate(&mut grads, *w, gw, self);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut gb = vec![0.0; dout];
                            for row in go.chunks(dout) {
                                for (acc, g) in gb.iter_mut().zip(row) {
                                    *acc += g;
                                }
                            }
                            accumulate(&mut grads, *b, gb, self);
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    self.conv_backward(&mut grads, &gout, *x, *w, *b, *stride, *pad, cols.as_deref(), node.value.shape());
                }
                Op::Scalar { inputs } => {
                    let up = gout.item();
                    for (v, local) in inputs {
                        if self.rg(*v) {
                            let g: Vec<f64> = local.data().iter().map(|l| l * up).collect();
                            accumulate(&mut grads, *v, g, self);
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = gout.item();
                    for (v, wgt) in terms {
                        if self.rg(*v) {
                            accumulate(&mut grads, *v, vec![up * wgt], self);
                        }
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Option<&[f64]>,
        out_shape: &[usize],
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (ckk, hw) = (c * kh * kw, ho * wo);
        let go = gout.data();

        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0; o];
                for s in 0..n {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let base = (s * o + oc) * hw;
                        *acc += go[base..base + hw].iter().sum::<f64>();
                    }
                }
                accumulate(grads, b, gb, self);
            }
        }
        if self.rg(w) {
            let cols = cols.expect("im2col buffers retained for differentiable kernels");
            let mut gw = vec![0.0; o * ckk];
            for s in 0..n {
                gemm(
                    o,
                    hw,
                    ckk,
                    &go[s * o * hw..(s + 1) * o * hw],
                    (hw as isize, 1),
                    &cols[s * ckk * hw..(s + 1) * ckk * hw],
                    (1, hw as isize),
                    1.0,
                    &mut gw,
                    (ckk as isize, 1),
                );
            }
            accumulate(grads, w, gw, self);
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            let mut dcols = vec![0.0; ckk * hw];
            let mut gx = vec![0.0; n * c * h * wd];
            for s in 0..n {
                gemm(
                    ckk,
                    o,
                    hw,
                    wv,
                    (1, ckk as isize),
                    &go[s * o * hw..(s + 1) * o * hw],
                    (hw as isize, 1),
                    0.0,
                    &mut dcols,
                    (hw as isize, 1),
                );
                col2im(&dcols, c, h, wd, kh, kw, stride, pad, ho, wo, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
            }
            accumulate(grads, x, gx, self);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>, graph: &Graph) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            let shape = graph.value(v).shape().to_vec();
            *slot = Some(Tensor::new(shape, g).expect("gradient matches value shape"));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * wo + oj] = if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                            x[(ch * h + ii as usize) * w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            x[(ch * h + ii as usize) * w + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}
