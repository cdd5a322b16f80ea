//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is eager: every operation validates shapes, computes its value
//! immediately, and appends one [`Op`] record. [`Tape::backward`] walks the
//! records in reverse, routing the scalar loss gradient to every recorded
//! node; repeated backward calls accumulate into the persistent per-node
//! gradients until [`Tape::zero_grads`] resets them.
//!
//! Nodes are addressed by the copyable handle [`Var`]. Anything reachable
//! from a gradient-requiring leaf is itself marked as requiring a gradient,
//! and the backward sweep skips work for branches that never reach one —
//! constants (labels, masks) cost nothing beyond their forward arithmetic.
//!
//! The arithmetic vocabulary is exactly what the network and its losses
//! need: elementwise and scalar arithmetic, `relu`/`sigmoid`/`ln`/`clamp`/
//! `pow`, row softmax, sum/mean reductions, reshape, channel concat/slice,
//! convolution, max pooling, nearest upsampling, global average pooling,
//! batch normalization, channel-maximum reversal, banded context pooling,
//! fully-connected maps, batched matrix products with transpose flags, and
//! per-channel scaling.

use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxLast(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, from: usize, to: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, r: usize },
    GlobalAvgPool { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Tensor, var: Tensor, eps: f64, batch_stats: bool },
    SelfReversal { x: Var, argmax: Vec<usize> },
    Dcp { z: Var, w: Var, b: Var, tau: usize, delta: Tensor },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    ChannelScale { x: Var, s: Var },
}

/// Eager reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient of a node, if the node required one and a
    /// backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Register an input tensor. `requires_grad` marks it as a gradient
    /// target (parameters, gradient-checked inputs); constants such as
    /// labels should leave it off. Non-finite inputs are rejected.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("leaf tensor of shape {:?}", t.shape())));
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                op,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        Ok(())
    }

    fn ew2(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = Tensor::from_vec(
            self.values[a.0].shape(),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(x, y)| f(*x, *y))
                .collect(),
        );
        let r = self.req(a) || self.req(b);
        self.push(out, op, r)
    }

    fn ew1(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = Tensor::from_vec(
            self.values[a.0].shape(),
            self.values[a.0].data().iter().map(|x| f(*x)).collect(),
        );
        let r = self.req(a);
        self.push(out, op, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.ew2(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.ew2(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.ew2(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.ew2(Op::Div(a, b), a, b, |x, y| x / y))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.ew1(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.ew1(Op::MulScalar(a, s), a, |x| x * s)
    }

    /// Elementwise `x^s` for positive `x` (callers guarantee the domain —
    /// the losses apply it to clamped probabilities).
    pub fn pow_scalar(&mut self, a: Var, s: f64) -> Var {
        self.ew1(Op::PowScalar(a, s), a, |x| x.powf(s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.ew1(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.ew1(Op::Sigmoid(a), a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.ew1(Op::Ln(a), a, f64::ln)
    }

    /// Elementwise clamp; the gradient passes through inside `[lo, hi]` and
    /// is zero where the input was cut off.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.ew1(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = ops::softmax_last(&self.values[a.0]);
        let r = self.req(a);
        self.push(out, Op::SoftmaxLast(a), r)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        let r = self.req(a);
        self.push(Tensor::scalar(s), Op::Sum(a), r)
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let r = self.req(a);
        self.push(Tensor::scalar(s), Op::Mean(a), r)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].clone().reshaped(shape)?;
        let r = self.req(a);
        Ok(self.push(out, Op::Reshape(a), r))
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let lead = self.values[parts[0].0].shape();
        let lead_outer = &lead[..lead.len() - 1];
        let mut total_last = 0;
        for p in parts {
            let s = self.values[p.0].shape();
            if &s[..s.len() - 1] != lead_outer {
                return Err(Error::shape(
                    "concat",
                    format!("operand shapes {:?} vs {:?} differ before the last axis", lead, s),
                ));
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead_outer.iter().product();
        let mut shape = lead_outer.to_vec();
        shape.push(total_last);
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        let mut offset = 0;
        for p in parts {
            let t = &self.values[p.0];
            let c = *t.shape().last().unwrap();
            for row in 0..rows {
                od[row * total_last + offset..row * total_last + offset + c]
                    .copy_from_slice(&t.data()[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let r = parts.iter().any(|p| self.req(*p));
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), r))
    }

    /// Channels `[from, to)` of the last axis.
    pub fn slice_last(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let c = *t.shape().last().unwrap();
        if from >= to || to > c {
            return Err(Error::shape(
                "slice",
                format!("range {from}..{to} out of bounds for {c} channels"),
            ));
        }
        let rows = t.numel() / c;
        let width = to - from;
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        for row in 0..rows {
            od[row * width..(row + 1) * width]
                .copy_from_slice(&t.data()[row * c + from..row * c + to]);
        }
        let r = self.req(x);
        Ok(self.push(out, Op::SliceLast { x, from, to }, r))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|b| &self.values[b.0]),
            &spec,
        )?;
        let r = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, r))
    }

    pub fn max_pool(&mut self, x: Var, r: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool_forward(&self.values[x.0], r)?;
        let rq = self.req(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rq))
    }

    pub fn upsample(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::upsample_forward(&self.values[x.0], r)?;
        let rq = self.req(x);
        Ok(self.push(out, Op::Upsample { x, r }, rq))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool_forward(&self.values[x.0])?;
        let rq = self.req(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rq))
    }

    /// Batch normalization against the given statistics. With
    /// `batch_stats`, μ and v must be the biased batch statistics of `x`
    /// (the layer computes them via [`ops::bn_stats`]) and the backward
    /// pass differentiates through them; otherwise they are constants
    /// (eval mode with running averages).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor,
        var: Tensor,
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let out = ops::bn_forward(
            &self.values[x.0],
            &mean,
            &var,
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        )?;
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean, var, eps, batch_stats }, r))
    }

    /// Per-channel maximum reversal (`max over the plane − x`).
    pub fn self_reversal(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::self_reversal_forward(&self.values[x.0])?;
        let r = self.req(x);
        Ok(self.push(out, Op::SelfReversal { x, argmax }, r))
    }

    /// Banded context pooling: the 2×2 window projection defined by
    /// `(w, b)` is applied to `z`, and windows are aggregated over the
    /// band of half-width `tau` (see [`ops::dcp_pool_forward`]).
    pub fn dcp_pool(&mut self, z: Var, w: Var, b: Var, tau: usize) -> Result<Var> {
        let delta =
            ops::delta_conv_forward(&self.values[z.0], &self.values[w.0], &self.values[b.0])?;
        let out = ops::dcp_pool_forward(&self.values[z.0], &delta, tau)?;
        let r = self.req(z) || self.req(w) || self.req(b);
        Ok(self.push(out, Op::Dcp { z, w, b, tau, delta }, r))
    }

    /// Fully-connected map: `y[n, out] = x[n, in] · w[in, out] (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin) = self.values[x.0].dims2("linear")?;
        let (win, wout) = self.values[w.0].dims2("linear.weight")?;
        if win != cin {
            return Err(Error::shape(
                "linear",
                format!("input has {cin} features, weight expects {win}"),
            ));
        }
        if let Some(b) = b {
            if self.values[b.0].shape() != [wout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {wout} outputs", self.values[b.0].shape()),
                ));
            }
        }
        let mut out = Tensor::zeros(&[n, wout]);
        crate::linalg::gemm(
            n,
            wout,
            cin,
            self.values[x.0].data(),
            cin,
            self.values[w.0].data(),
            wout,
            out.data_mut(),
            wout,
            false,
        );
        if let Some(bv) = b {
            let bd = self.values[bv.0].data().to_vec();
            let od = out.data_mut();
            for row in 0..n {
                for (j, bj) in bd.iter().enumerate() {
                    od[row * wout + j] += bj;
                }
            }
        }
        let r = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(out, Op::Linear { x, w, b }, r))
    }

    /// Batched matrix product `out[i] = A_i^(T?) · B_i^(T?)`. `a` is rank-3
    /// `[n, ·, ·]`; `b` is rank-3 with the same batch extent or rank-2 and
    /// shared across the batch (its gradient then sums over the batch).
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = bmm_forward(&self.values[a.0], &self.values[b.0], ta, tb)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, r))
    }

    /// Scale every channel plane: `out[n,y,x,c] = x[n,y,x,c] · s[n,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, h, w, c) = self.values[x.0].dims4("channel_scale")?;
        if self.values[s.0].shape() != [n, c] {
            return Err(Error::shape(
                "channel_scale",
                format!(
                    "scale {:?} does not match batch {n} × channels {c}",
                    self.values[s.0].shape()
                ),
            ));
        }
        let mut out = Tensor::zeros(&[n, h, w, c]);
        let (xd, sd) = (self.values[x.0].data(), self.values[s.0].data());
        let od = out.data_mut();
        for nn in 0..n {
            for p in 0..h * w {
                let base = (nn * h * w + p) * c;
                for ch in 0..c {
                    od[base + ch] = xd[base + ch] * sd[nn * c + ch];
                }
            }
        }
        let r = self.req(x) || self.req(s);
        Ok(self.push(out, Op::ChannelScale { x, s }, r))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into the
    /// tape's persistent per-node slots; call [`Tape::zero_grads`] between
    /// independent losses if accumulation is not wanted.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        let mut lg: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        lg[loss.0] = Some(Tensor::filled(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = lg[i].take() else { continue };
            if !self.requires[i] {
                continue;
            }
            self.dispatch(i, &g, &mut lg);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Route node `i`'s output gradient `g` to its parents.
    fn dispatch(&self, i: usize, g: &Tensor, lg: &mut [Option<Tensor>]) {
        let values = &self.values;
        let acc = |lg: &mut [Option<Tensor>], v: Var, t: Tensor| {
            debug_assert_eq!(values[v.0].shape(), t.shape());
            match &mut lg[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        // Only push into parents that themselves require gradients.
        let want = |v: &Var| self.requires[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    acc(lg, *a, g.clone());
                }
                if want(b) {
                    acc(lg, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    acc(lg, *a, g.clone());
                }
                if want(b) {
                    acc(lg, *b, map1(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    acc(lg, *a, map2(g, &values[b.0], |g, y| g * y));
                }
                if want(b) {
                    acc(lg, *b, map2(g, &values[a.0], |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    acc(lg, *a, map2(g, &values[b.0], |g, y| g / y));
                }
                if want(b) {
                    let mut t = Tensor::zeros(g.shape());
                    let (gd, ad, bd) = (g.data(), values[a.0].data(), values[b.0].data());
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o = -gd[i] * ad[i] / (bd[i] * bd[i]);
                    }
                    acc(lg, *b, t);
                }
            }
            Op::AddScalar(a) => {
                if want(a) {
                    acc(lg, *a, g.clone());
                }
            }
            Op::MulScalar(a, s) => {
                if want(a) {
                    let s = *s;
                    acc(lg, *a, map1(g, |x| x * s));
                }
            }
            Op::PowScalar(a, s) => {
                if want(a) {
                    let s = *s;
                    acc(lg, *a, map2(g, &values[a.0], |g, x| g * s * x.powf(s - 1.0)));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    acc(lg, *a, map2(g, &values[a.0], |g, x| if x > 0.0 { g } else { 0.0 }));
                }
            }
            Op::Sigmoid(a) => {
                if want(a) {
                    acc(lg, *a, map2(g, &values[i], |g, y| g * y * (1.0 - y)));
                }
            }
            Op::Ln(a) => {
                if want(a) {
                    acc(lg, *a, map2(g, &values[a.0], |g, x| g / x));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if want(a) {
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        lg,
                        *a,
                        map2(g, &values[a.0], |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                    );
                }
            }
            Op::SoftmaxLast(a) => {
                if want(a) {
                    let y = &values[i];
                    let c = *y.shape().last().unwrap();
                    let mut t = Tensor::zeros(y.shape());
                    let (gd, yd) = (g.data(), y.data());
                    let td = t.data_mut();
                    for row in 0..yd.len() / c {
                        let gs = &gd[row * c..(row + 1) * c];
                        let ys = &yd[row * c..(row + 1) * c];
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            td[row * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    acc(lg, *a, t);
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    acc(lg, *a, Tensor::filled(values[a.0].shape(), g.item()));
                }
            }
            Op::Mean(a) => {
                if want(a) {
                    let n = values[a.0].numel() as f64;
                    acc(lg, *a, Tensor::filled(values[a.0].shape(), g.item() / n));
                }
            }
            Op::Reshape(a) => {
                if want(a) {
                    acc(lg, *a, g.clone().reshaped(values[a.0].shape()).expect("reshape grad"));
                }
            }
            Op::ConcatLast(parts) => {
                let total = *values[i].shape().last().unwrap();
                let rows = values[i].numel() / total;
                let mut offset = 0;
                for p in parts {
                    let c = *values[p.0].shape().last().unwrap();
                    if want(p) {
                        let mut t = Tensor::zeros(values[p.0].shape());
                        let td = t.data_mut();
                        for row in 0..rows {
                            td[row * c..(row + 1) * c].copy_from_slice(
                                &g.data()[row * total + offset..row * total + offset + c],
                            );
                        }
                        acc(lg, *p, t);
                    }
                    offset += c;
                }
            }
            Op::SliceLast { x, from, to } => {
                if want(x) {
                    let c = *values[x.0].shape().last().unwrap();
                    let width = to - from;
                    let rows = values[x.0].numel() / c;
                    let mut t = Tensor::zeros(values[x.0].shape());
                    let td = t.data_mut();
                    for row in 0..rows {
                        td[row * c + from..row * c + to]
                            .copy_from_slice(&g.data()[row * width..(row + 1) * width]);
                    }
                    acc(lg, *x, t);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                if want(x) {
                    acc(lg, *x, ops::conv2d_backward_x(g, &values[w.0], spec, values[x.0].shape()));
                }
                if want(w) {
                    acc(lg, *w, ops::conv2d_backward_w(g, &values[x.0], spec));
                }
                if let Some(b) = b {
                    if want(b) {
                        acc(lg, *b, ops::conv2d_backward_b(g));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if want(x) {
                    acc(lg, *x, ops::max_pool_backward(g, argmax, values[x.0].shape()));
                }
            }
            Op::Upsample { x, r } => {
                if want(x) {
                    acc(lg, *x, ops::upsample_backward(g, *r));
                }
            }
            Op::GlobalAvgPool { x } => {
                if want(x) {
                    acc(lg, *x, ops::global_avg_pool_backward(g, values[x.0].shape()));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps, batch_stats } => {
                let (dx, dgamma, dbeta) = ops::bn_backward(
                    &values[x.0],
                    mean,
                    var,
                    &values[gamma.0],
                    *eps,
                    g,
                    *batch_stats,
                );
                if want(x) {
                    acc(lg, *x, dx);
                }
                if want(gamma) {
                    acc(lg, *gamma, dgamma);
                }
                if want(beta) {
                    acc(lg, *beta, dbeta);
                }
            }
            Op::SelfReversal { x, argmax } => {
                if want(x) {
                    acc(lg, *x, ops::self_reversal_backward(g, argmax));
                }
            }
            Op::Dcp { z, w, b, tau, delta } => {
                let (dz_pool, ddelta) = ops::dcp_pool_backward(&values[z.0], delta, *tau, g);
                let (dz_conv, dw, db) = ops::delta_conv_backward(&ddelta, &values[z.0], &values[w.0]);
                if want(z) {
                    // z feeds both the windows and the kernel projection.
                    let mut dz = dz_pool;
                    for (a, b) in dz.data_mut().iter_mut().zip(dz_conv.data()) {
                        *a += b;
                    }
                    acc(lg, *z, dz);
                }
                if want(w) {
                    acc(lg, *w, dw);
                }
                if want(b) {
                    acc(lg, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, cin) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                let cout = values[w.0].shape()[1];
                if want(x) {
                    let wt = transpose_copy(cin, cout, values[w.0].data());
                    let mut dx = Tensor::zeros(values[x.0].shape());
                    crate::linalg::gemm(n, cin, cout, g.data(), cout, &wt, cin, dx.data_mut(), cin, false);
                    acc(lg, *x, dx);
                }
                if want(w) {
                    let xt = transpose_copy(n, cin, values[x.0].data());
                    let mut dw = Tensor::zeros(values[w.0].shape());
                    crate::linalg::gemm(cin, cout, n, &xt, n, g.data(), cout, dw.data_mut(), cout, false);
                    acc(lg, *w, dw);
                }
                if let Some(b) = b {
                    if want(b) {
                        let mut db = Tensor::zeros(&[cout]);
                        let dbd = db.data_mut();
                        for (j, gv) in g.data().iter().enumerate() {
                            dbd[j % cout] += gv;
                        }
                        acc(lg, *b, db);
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (da, db) =
                    bmm_backward(&values[a.0], &values[b.0], *ta, *tb, g, want(a), want(b));
                if let Some(da) = da {
                    acc(lg, *a, da);
                }
                if let Some(db) = db {
                    acc(lg, *b, db);
                }
            }
            Op::ChannelScale { x, s } => {
                let [n, h, w, c] = *values[x.0].shape() else { unreachable!() };
                if want(x) {
                    let mut dx = Tensor::zeros(values[x.0].shape());
                    let (gd, sd) = (g.data(), values[s.0].data());
                    let dxd = dx.data_mut();
                    for nn in 0..n {
                        for p in 0..h * w {
                            let base = (nn * h * w + p) * c;
                            for ch in 0..c {
                                dxd[base + ch] = gd[base + ch] * sd[nn * c + ch];
                            }
                        }
                    }
                    acc(lg, *x, dx);
                }
                if want(s) {
                    let mut ds = Tensor::zeros(values[s.0].shape());
                    let (gd, xd) = (g.data(), values[x.0].data());
                    let dsd = ds.data_mut();
                    for nn in 0..n {
                        for p in 0..h * w {
                            let base = (nn * h * w + p) * c;
                            for ch in 0..c {
                                dsd[nn * c + ch] += gd[base + ch] * xd[base + ch];
                            }
                        }
                    }
                    acc(lg, *s, ds);
                }
            }
        }
    }
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|x| f(*x)).collect())
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn transpose_copy(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Logical dimensions of one batched-matmul operand.
fn bmm_dims(t: &Tensor, transposed: bool, op: &'static str) -> Result<(usize, usize, usize)> {
    let (batch, rows, cols) = match t.shape() {
        [n, r, c] => (*n, *r, *c),
        [r, c] => (0, *r, *c), // batch 0 marks a shared rank-2 operand
        s => {
            return Err(Error::shape(op, format!("expected rank-2/3 operand, got {s:?}")));
        }
    };
    let (p, q) = if transposed { (cols, rows) } else { (rows, cols) };
    Ok((batch, p, q))
}

fn bmm_forward(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (na, pa, qa) = bmm_dims(a, ta, "bmm")?;
    let (nb, qb, r) = bmm_dims(b, tb, "bmm")?;
    if na == 0 {
        return Err(Error::shape("bmm", "left operand must be rank-3"));
    }
    if nb != 0 && nb != na {
        return Err(Error::shape("bmm", format!("batch extents {na} vs {nb}")));
    }
    if qa != qb {
        return Err(Error::shape("bmm", format!("inner extents {qa} vs {qb} differ")));
    }
    let mut out = Tensor::zeros(&[na, pa, r]);
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = if nb == 0 { (b.shape()[0], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
    let shared_b = if nb == 0 && tb { Some(transpose_copy(br, bc, b.data())) } else { None };
    for i in 0..na {
        let amat = &a.data()[i * ar * ac..(i + 1) * ar * ac];
        let astore;
        let aslice: &[f64] = if ta {
            astore = transpose_copy(ar, ac, amat);
            &astore
        } else {
            amat
        };
        let bmat = if nb == 0 { b.data() } else { &b.data()[i * br * bc..(i + 1) * br * bc] };
        let bstore;
        let bslice: &[f64] = if tb {
            if let Some(shared) = &shared_b {
                shared
            } else {
                bstore = transpose_copy(br, bc, bmat);
                &bstore
            }
        } else {
            bmat
        };
        crate::linalg::gemm(
            pa,
            r,
            qa,
            aslice,
            qa,
            bslice,
            r,
            &mut out.data_mut()[i * pa * r..(i + 1) * pa * r],
            r,
            false,
        );
    }
    Ok(out)
}

fn bmm_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (na, pa, qa) = bmm_dims(a, ta, "bmm").expect("validated in forward");
    let (nb, _, r) = bmm_dims(b, tb, "bmm").expect("validated in forward");
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = if nb == 0 { (b.shape()[0], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
    let mut da = want_a.then(|| Tensor::zeros(a.shape()));
    let mut db = want_b.then(|| Tensor::zeros(b.shape()));
    for i in 0..na {
        let gmat = &g.data()[i * pa * r..(i + 1) * pa * r];
        let amat = &a.data()[i * ar * ac..(i + 1) * ar * ac];
        let bmat = if nb == 0 { b.data() } else { &b.data()[i * br * bc..(i + 1) * br * bc] };
        // Logical copies (transposed storage resolved up front).
        let a_log = if ta { transpose_copy(ar, ac, amat) } else { amat.to_vec() };
        let b_log = if tb { transpose_copy(br, bc, bmat) } else { bmat.to_vec() };
        if let Some(da) = &mut da {
            // dA_log = G · B_logᵀ  ∈ [pa, qa]
            let b_log_t = transpose_copy(qa, r, &b_log);
            let mut dal = vec![0.0; pa * qa];
            crate::linalg::gemm(pa, qa, r, gmat, r, &b_log_t, qa, &mut dal, qa, false);
            let dal_store = if ta { transpose_copy(pa, qa, &dal) } else { dal };
            for (dst, src) in da.data_mut()[i * ar * ac..(i + 1) * ar * ac]
                .iter_mut()
                .zip(&dal_store)
            {
                *dst += src;
            }
        }
        if let Some(db) = &mut db {
            // dB_log = A_logᵀ · G ∈ [qa, r]
            let a_log_t = transpose_copy(pa, qa, &a_log);
            let mut dbl = vec![0.0; qa * r];
            crate::linalg::gemm(qa, r, pa, &a_log_t, pa, gmat, r, &mut dbl, r, false);
            let dbl_store = if tb { transpose_copy(qa, r, &dbl) } else { dbl };
            let dst_range = if nb == 0 { 0..br * bc } else { i * br * bc..(i + 1) * br * bc };
            for (dst, src) in db.data_mut()[dst_range].iter_mut().zip(&dbl_store) {
                *dst += src;
            }
        }
    }
    (da, db)
}
