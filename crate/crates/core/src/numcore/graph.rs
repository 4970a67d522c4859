//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value. A node participates in
//! backpropagation iff one of its inputs does. `backward` walks the tape once
//! in reverse insertion order, which is a valid topological order because an
//! op can only consume vars that already exist.

use std::collections::BTreeMap;

use super::kernels::{self, gemm, ConvGeom};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for ops implemented outside this module.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where the input
    /// receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOpts,
    },
    PadReflect(Var, usize),
    AvgPool(Var, usize, usize),
    Upsample(Var, usize),
    Cosine {
        a: Var,
        b: Var,
        norms: Vec<(f64, f64)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by leaf var.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_hash: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the relu activation pattern seen so far. Two evaluations with
    /// equal hashes took the same branch at every relu.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally computed op with its own backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let name = op.name();
        self.push(name, output, Op::Custom(op, inputs.to_vec()), inputs)
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; out_shape.iter().product()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(xa).zip(xb) {
                *o = f(x, y);
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(xa[ia], xb[ib]));
        }
        Ok((Tensor::from_parts(out_shape, out), a, b))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(name, t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// relu with derivative 0 at exactly 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut h = self.kink_hash;
        for chunk in self.value(x).data().chunks(64) {
            let bits = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i));
            h = (h ^ bits).wrapping_mul(0x0100_0000_01b3);
        }
        self.kink_hash = h;
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[.., m, k] · [k, n]` (shared right operand) or batched
    /// `[.., m, k] · [.., k, n]` with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if plan.shared_rhs {
            gemm(plan.batch * plan.m, plan.k, plan.n, xa, false, xb, false, &mut out, false);
        } else {
            let (sa_, sb_, sc_) = (plan.m * plan.k, plan.k * plan.n, plan.m * plan.n);
            for bi in 0..plan.batch {
                gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    &xa[bi * sa_..],
                    false,
                    &xb[bi * sb_..],
                    false,
                    &mut out[bi * sc_..],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(plan.n);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` over the trailing axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(src.data(), shape, axes);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, data),
            Op::Permute(x, axes.to_vec()),
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, &[x])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums out one axis (the axis is removed; rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("sum_axis", Tensor::from_parts(out_shape, out), Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalisation and attention primitives --------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(x, axis), &[x])
    }

    /// Normalises the trailing axis, then applies `gamma`, `beta` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-channel batch norm over an NCHW tensor. In training mode returns
    /// the running statistics after a momentum update; `running` itself is
    /// never mutated so graph construction stays a pure function.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnStats,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("batch_norm", format!("expected NCHW, got {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", &shape, &[running.mean.len()]));
        }
        let m = (n * hw) as f64;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        let mut updated = running.clone();
        for ch in 0..c {
            let plane = |s: usize| &src[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let (mu, var) = match mode {
                BnMode::Train => {
                    let mu = (0..n).map(|s| plane(s).iter().sum::<f64>()).sum::<f64>() / m;
                    let var = (0..n)
                        .map(|s| plane(s).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                        .sum::<f64>()
                        / m;
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    updated.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mu;
                    updated.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * unbiased;
                    (mu, var)
                }
                BnMode::Eval => (running.mean[ch], running.var[ch]),
            };
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    let h = (src[base + i] - mu) * is;
                    xhat[base + i] = h;
                    out[base + i] = h * g[ch] + b[ch];
                }
            }
        }
        let v = self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, (mode == BnMode::Train).then_some(updated)))
    }

    /// NCHW convolution with zero padding. `w` is `[Cout, Cin/groups, kh, kw]`,
    /// `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = conv_geom(&xs, &ws, opts).ok_or_else(|| Error::shape("conv2d", &xs, &ws))?;
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let (n, cout, g) = (xs[0], ws[0], opts.groups);
        let (cout_g, k) = (cout / g, geom.cin * geom.kh * geom.kw);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ohw = oh * ow;
        let cin = xs[1];
        let in_plane = xs[2] * xs[3];
        let src = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * cout * ohw];
        let mut cols = vec![0.0; k * ohw];
        for s in 0..n {
            for gi in 0..g {
                let xoff = (s * cin + gi * geom.cin) * in_plane;
                kernels::im2col(&src[xoff..xoff + geom.cin * in_plane], &geom, &mut cols);
                let ooff = (s * cout + gi * cout_g) * ohw;
                gemm(
                    cout_g,
                    k,
                    ohw,
                    &wd[gi * cout_g * k..],
                    false,
                    &cols,
                    false,
                    &mut out[ooff..ooff + cout_g * ohw],
                    false,
                );
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for s in 0..n {
                for co in 0..cout {
                    let base = (s * cout + co) * ohw;
                    out[base..base + ohw].iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, cout, oh, ow], out),
            Op::Conv2d { x, w, b, opts },
            &inputs,
        )
    }

    /// Reflect padding of the two spatial axes of an NCHW tensor.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || pad >= s[2] || pad >= s[3] {
            return Err(Error::invalid("pad_reflect", format!("pad {pad} for {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..ph {
                let sy = kernels::reflect(y as isize - pad as isize, h);
                for xx in 0..pw {
                    let sx = kernels::reflect(xx as isize - pad as isize, w);
                    out[(p * ph + y) * pw + xx] = src[(p * h + sy) * w + sx];
                }
            }
        }
        self.push(
            "pad_reflect",
            Tensor::from_parts(vec![s[0], s[1], ph, pw], out),
            Op::PadReflect(x, pad),
            &[x],
        )
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(Error::invalid("avg_pool2d", format!("kernel {kernel} for {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = (p * h + oy * stride + ky) * w + ox * stride;
                        acc += src[row..row + kernel].iter().sum::<f64>();
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        self.push(
            "avg_pool2d",
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::AvgPool(x, kernel, stride),
            &[x],
        )
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::invalid("upsample", format!("factor {factor} for {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.push(
            "upsample",
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::Upsample(x, factor),
            &[x],
        )
    }

    /// Cosine similarity along the trailing axis; `[.., D] × [.., D] → [..]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::shape("cosine_similarity", &sa, self.shape(b)));
        }
        let d = *sa.last().unwrap();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let rows = xa.len() / d;
        let mut out = vec![0.0; rows];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&xa[r * d..(r + 1) * d], &xb[r * d..(r + 1) * d]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::invalid("cosine_similarity", format!("zero-norm vector in row {r}")));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out[r] = dot / (na * nb);
            norms.push((na, nb));
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(
            "cosine_similarity",
            Tensor::from_parts(shape, out),
            Op::Cosine { a, b, norms },
            &[a, b],
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d`loss` to every leaf that requires grad, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, i, g, &mut grads, &mut out);
        }
        self.kink_hash = Graph::new().kink_hash;
        Ok(out)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backward_node(nodes: &[Node], i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {
            out.grads
                .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            let shape = node.value.shape().to_vec();
            if let Some(ga) = acc(grads, nodes, *a) {
                reduce_broadcast(&shape, &sa, &sb, true, &g, ga, |gi, _, _| gi);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                reduce_broadcast(&shape, &sa, &sb, false, &g, gb, |gi, _, _| sign * gi);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let div = matches!(node.op, Op::Div(..));
            let (ta, tb) = (val(*a), val(*b));
            let (xa, xb) = (ta.data(), tb.data());
            let shape = node.value.shape().to_vec();
            if let Some(ga) = acc(grads, nodes, *a) {
                reduce_broadcast(&shape, ta.shape(), tb.shape(), true, &g, ga, |gi, _, ib| {
                    if div {
                        gi / xb[ib]
                    } else {
                        gi * xb[ib]
                    }
                });
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                reduce_broadcast(&shape, ta.shape(), tb.shape(), false, &g, gb, |gi, ia, ib| {
                    if div {
                        -gi * xa[ia] / (xb[ib] * xb[ib])
                    } else {
                        gi * xa[ia]
                    }
                });
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(&g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &v) in gx.iter_mut().zip(&g).zip(xv) {
                    if v > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &y) in gx.iter_mut().zip(&g).zip(y) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &v) in gx.iter_mut().zip(&g).zip(xv) {
                    *d += s * kernels::sigmoid(v);
                }
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &y) in gx.iter_mut().zip(&g).zip(y) {
                    *d += s * y;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatMulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if plan.shared_rhs {
                let rows = plan.batch * m;
                if let Some(ga) = acc(grads, nodes, *a) {
                    gemm(rows, n, k, &g, false, tb.data(), true, ga, true);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    gemm(k, rows, n, ta.data(), true, &g, false, gb, true);
                }
            } else {
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(ga) = acc(grads, nodes, *a) {
                    for bi in 0..plan.batch {
                        gemm(m, n, k, &g[bi * sc..], false, &tb.data()[bi * sb..], true, &mut ga[bi * sa..], true);
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for bi in 0..plan.batch {
                        gemm(k, m, n, &ta.data()[bi * sa..], true, &g[bi * sc..], false, &mut gb[bi * sb..], true);
                    }
                }
            }
        }
        Op::Permute(x, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let back = permute_data(&g, node.value.shape(), &inv);
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat(xs, axis) => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let len = val(v).shape()[*axis] * inner;
                if let Some(gv) = acc(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        gv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = val(*x).shape().to_vec();
            let len = node.value.shape()[*axis];
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let n = val(*x).len();
            let s = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumAxis(x, axis) => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *node.value.shape().last().unwrap();
            let gam = val(*gamma).data();
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        gg[j] += row[j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, s)| *a += s);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, row) in g.chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = row.iter().zip(gam).map(|(s, w)| s * w).collect();
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += inv_std[r] * (dh[j] - m1 - h[j] * m2);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gam = val(*gamma).data();
            let m = (n * hw) as f64;
            let planes = |ch: usize| (0..n).map(move |sm| (sm * c + ch) * hw);
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for ch in 0..c {
                for base in planes(ch) {
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gh[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                gg.iter_mut().zip(&sum_gh).for_each(|(d, v)| *d += v);
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch];
                    for base in planes(ch) {
                        for i in base..base + hw {
                            gx[i] += match mode {
                                BnMode::Eval => k * g[i],
                                BnMode::Train => k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gh[ch] / m),
                            };
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, opts } => {
            let (tx, tw) = (val(*x), val(*w));
            let (xs, ws) = (tx.shape(), tw.shape());
            let geom = conv_geom(xs, ws, *opts).expect("validated in forward");
            let (n, cin, cout, gr) = (xs[0], xs[1], ws[0], opts.groups);
            let (cout_g, k) = (cout / gr, geom.cin * geom.kh * geom.kw);
            let ohw = geom.out_h() * geom.out_w();
            let in_plane = xs[2] * xs[3];
            if let Some(b) = b {
                if let Some(gb) = acc(grads, nodes, *b) {
                    for s in 0..n {
                        for co in 0..cout {
                            let base = (s * cout + co) * ohw;
                            gb[co] += g[base..base + ohw].iter().sum::<f64>();
                        }
                    }
                }
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut cols = vec![0.0; k * ohw];
            let mut gw_local = if need_w { vec![0.0; tw.len()] } else { Vec::new() };
            let mut gx_local = if need_x { vec![0.0; tx.len()] } else { Vec::new() };
            for s in 0..n {
                for gi in 0..gr {
                    let xoff = (s * cin + gi * geom.cin) * in_plane;
                    let goff = (s * cout + gi * cout_g) * ohw;
                    let gblk = &g[goff..goff + cout_g * ohw];
                    if need_w {
                        kernels::im2col(&tx.data()[xoff..xoff + geom.cin * in_plane], &geom, &mut cols);
                        gemm(cout_g, ohw, k, gblk, false, &cols, true, &mut gw_local[gi * cout_g * k..], true);
                    }
                    if need_x {
                        gemm(k, cout_g, ohw, &tw.data()[gi * cout_g * k..], true, gblk, false, &mut cols, false);
                        kernels::col2im(&cols, &geom, &mut gx_local[xoff..xoff + geom.cin * in_plane]);
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                gw.iter_mut().zip(&gw_local).for_each(|(d, v)| *d += v);
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(&gx_local).for_each(|(d, v)| *d += v);
            }
        }
        Op::PadReflect(x, pad) => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            if let Some(gx) = acc(grads, nodes, *x) {
                for p in 0..s[0] * s[1] {
                    for y in 0..ph {
                        let sy = kernels::reflect(y as isize - *pad as isize, h);
                        for xx in 0..pw {
                            let sx = kernels::reflect(xx as isize - *pad as isize, w);
                            gx[(p * h + sy) * w + sx] += g[(p * ph + y) * pw + xx];
                        }
                    }
                }
            }
        }
        Op::AvgPool(x, kernel, stride) => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let os = node.value.shape();
            let (oh, ow) = (os[2], os[3]);
            let norm = 1.0 / (kernel * kernel) as f64;
            if let Some(gx) = acc(grads, nodes, *x) {
                for p in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] * norm;
                            for ky in 0..*kernel {
                                let row = (p * h + oy * stride + ky) * w + ox * stride;
                                gx[row..row + kernel].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample(x, f) => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h * f, w * f);
            if let Some(gx) = acc(grads, nodes, *x) {
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / f) * w + xx / f] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
            }
        }
        Op::Cosine { a, b, norms } => {
            let (xa, xb) = (val(*a).data(), val(*b).data());
            let d = *val(*a).shape().last().unwrap();
            let c = node.value.data();
            let mut da = vec![0.0; xa.len()];
            let mut db = vec![0.0; xb.len()];
            for (r, &(na, nb)) in norms.iter().enumerate() {
                for j in 0..d {
                    let (va, vb) = (xa[r * d + j], xb[r * d + j]);
                    da[r * d + j] = g[r] * (vb / (na * nb) - c[r] * va / (na * na));
                    db[r * d + j] = g[r] * (va / (na * nb) - c[r] * vb / (nb * nb));
                }
            }
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(&da).for_each(|(x, v)| *x += v);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(&db).for_each(|(x, v)| *x += v);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = probs.len() / labels.len();
            let scale = g[0] / labels.len() as f64;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let t = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - t);
                    }
                }
            }
        }
        Op::Custom(op, inputs) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let parts = op.backward(&vals, &node.value, &g);
            for (&v, part) in inputs.iter().zip(parts) {
                if let (Some(part), Some(gv)) = (part, acc(grads, nodes, v)) {
                    gv.iter_mut().zip(&part).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return None;
        }
        let lead_a = &sa[..sa.len() - 2];
        if sb.len() == 2 {
            return Some(Self {
                batch: lead_a.iter().product(),
                m,
                k,
                n,
                shared_rhs: true,
            });
        }
        (lead_a == &sb[..sb.len() - 2]).then(|| Self {
            batch: lead_a.iter().product(),
            m,
            k,
            n,
            shared_rhs: false,
        })
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], opts: Conv2dOpts) -> Option<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 || opts.groups == 0 || opts.stride == 0 {
        return None;
    }
    let g = opts.groups;
    if xs[1] % g != 0 || ws[0] % g != 0 || ws[1] != xs[1] / g {
        return None;
    }
    if xs[2] + 2 * opts.pad < ws[2] || xs[3] + 2 * opts.pad < ws[3] {
        return None;
    }
    Some(ConvGeom {
        cin: ws[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        stride: opts.stride,
        pad: opts.pad,
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let r = out_shape.len();
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Numpy-style broadcast of two shapes (right aligned, extent-1 expands).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                s[i - pad]
            }
        })
        .collect()
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
    let n: usize = out.iter().product();
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += ta[d];
            ib += tb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= ta[d] * out[d];
            ib -= tb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Accumulates `f(g[i], ia, ib)` into the gradient buffer of one operand,
/// summing over broadcast axes.
fn reduce_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    into_a: bool,
    g: &[f64],
    dst: &mut [f64],
    f: impl Fn(f64, usize, usize) -> f64,
) {
    if sa == sb {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(g[i], i, i);
        }
        return;
    }
    for_each_broadcast(out, sa, sb, |i, ia, ib| {
        let t = if into_a { ia } else { ib };
        dst[t] += f(g[i], ia, ib);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let m = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 2.0, -1.0, 7.0, 0.25]);
        let i = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let y = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(y), &m);
    }

    #[test]
    fn conv_of_ones_sums_windows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g
            .conv2d(x, w, None, Conv2dOpts { stride: 2, pad: 0, groups: 1 })
            .unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
        assert!(g.is_empty(), "tape cleared");
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn relu_zero_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3, 4]));
        let b = g.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).get(&[1, 2, 3]), 4.0);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[6.0; 4]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn pool_and_conv_extents() {
        // floor((n + 2p - k) / s) + 1
        for (n, k, s, p) in [(7, 3, 2, 1), (8, 2, 2, 0), (5, 3, 1, 0), (6, 3, 2, 0)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[1, 1, n, n]));
            let w = g.constant(Tensor::ones(&[1, 1, k, k]));
            let y = g
                .conv2d(x, w, None, Conv2dOpts { stride: s, pad: p, groups: 1 })
                .unwrap();
            let e = (n + 2 * p - k) / s + 1;
            assert_eq!(g.shape(y), &[1, 1, e, e]);
            let a = g.avg_pool2d(x, k, s).unwrap();
            let e = (n - k) / s + 1;
            assert_eq!(g.shape(a), &[1, 1, e, e]);
        }
    }
}
