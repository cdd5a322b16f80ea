//! Parameter storage and the reusable layer builders.
//!
//! All trainable state lives in one flat [`ParamStore`]: a named list of
//! tensors tagged as either [`ParamKind::Weight`] (updated by the
//! optimizer, visited by gradient checks) or [`ParamKind::Stat`]
//! (normalization running averages — saved and restored, never
//! differentiated). Layers hold [`PIdx`] handles into the store, so the
//! optimizer, checkpointing, and the parameter-count summary all walk a
//! single table without knowing the network structure.
//!
//! A forward pass runs inside a [`Cx`]: a fresh tape plus a mutable view
//! of the store. The first use of a parameter injects it as a tape leaf
//! (gradient-requiring in [`Phase::Train`]); further uses reuse the same
//! node, so shared parameters accumulate gradients naturally.
//!
//! Initialization follows the scheme used throughout: convolution and
//! fully-connected weights are He-normal draws (σ = √(2/fan-in)), biases
//! start at zero, normalization scales at one. Convolutions that feed a
//! batch-norm layer are built bias-free — the learned shift β plays that
//! role; standalone "bare" convolutions (projection heads) keep biases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

use crate::ops::{self, ConvSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// What a stored tensor is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight: optimized, gradient-checked.
    Weight,
    /// Running statistic: saved/loaded but never differentiated.
    Stat,
}

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PIdx(pub(crate) usize);

struct ParamEntry {
    name: String,
    kind: ParamKind,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Flat, name-indexed table of every tensor a model owns.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a tensor. Names must be unique — a duplicate is a
    /// model-construction bug, so it panics.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> PIdx {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value, grad: None });
        PIdx(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = PIdx> {
        (0..self.entries.len()).map(PIdx)
    }

    pub fn name(&self, i: PIdx) -> &str {
        &self.entries[i.0].name
    }

    pub fn kind(&self, i: PIdx) -> ParamKind {
        self.entries[i.0].kind
    }

    pub fn value(&self, i: PIdx) -> &Tensor {
        &self.entries[i.0].value
    }

    pub fn value_mut(&mut self, i: PIdx) -> &mut Tensor {
        &mut self.entries[i.0].value
    }

    pub fn grad(&self, i: PIdx) -> Option<&Tensor> {
        self.entries[i.0].grad.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<PIdx> {
        self.by_name.get(name).copied().map(PIdx)
    }

    /// Add `g` into the entry's gradient slot.
    pub fn accumulate_grad(&mut self, i: PIdx, g: &Tensor) {
        match &mut self.entries[i.0].grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Total scalar count of entries of one kind.
    pub fn numel_of_kind(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Whether a forward pass trains (batch statistics, gradient-requiring
/// weights) or evaluates (running statistics, no gradients).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// One forward pass: a tape plus the parameter store it reads.
pub struct Cx<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    phase: Phase,
    freeze_stats: bool,
    bind: Vec<Option<Var>>,
}

impl<'a> Cx<'a> {
    pub fn new(store: &'a mut ParamStore, phase: Phase) -> Self {
        let bind = vec![None; store.len()];
        Cx { tape: Tape::new(), store, phase, freeze_stats: false, bind }
    }

    /// Like [`Cx::new`], but running statistics are left untouched even in
    /// [`Phase::Train`] — used by finite-difference checks, which replay
    /// the forward pass many times and must not drift the model state.
    pub fn frozen(store: &'a mut ParamStore, phase: Phase) -> Self {
        let mut cx = Cx::new(store, phase);
        cx.freeze_stats = true;
        cx
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Bind a parameter onto the tape (memoized per parameter, so shared
    /// weights map to a single node). Weights require gradients in
    /// [`Phase::Train`]; statistics never do.
    pub fn p(&mut self, i: PIdx) -> Result<Var> {
        if let Some(v) = self.bind[i.0] {
            return Ok(v);
        }
        let requires =
            self.store.kind(i) == ParamKind::Weight && self.phase == Phase::Train;
        let v = self.tape.leaf(self.store.value(i).clone(), requires)?;
        self.bind[i.0] = Some(v);
        Ok(v)
    }

    /// Overwrite a running statistic (no-op when statistics are frozen).
    pub fn update_stat(&mut self, i: PIdx, value: Tensor) {
        debug_assert_eq!(self.store.kind(i), ParamKind::Stat);
        if self.freeze_stats {
            return;
        }
        *self.store.value_mut(i) = value;
    }

    /// Copy the tape gradients of every bound parameter back into the
    /// store (accumulating). Call after `tape.backward`.
    pub fn collect_grads(&mut self) {
        for (slot, var) in self.bind.iter().enumerate() {
            let Some(var) = var else { continue };
            if let Some(g) = self.tape.grad(*var) {
                let g = g.clone();
                self.store.accumulate_grad(PIdx(slot), &g);
            }
        }
    }
}

/// He-normal initialization: zero-mean Gaussian with σ = √(2/fan-in).
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..numel).map(|_| dist.sample(rng)).collect())
}

/// Deterministic generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A 2-D convolution layer (weights `[kh, kw, cin, cout]`).
pub struct Conv2d {
    pub w: PIdx,
    pub b: Option<PIdx>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = spec.kh * spec.kw * cin;
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            he_normal(rng, &[spec.kh, spec.kw, cin, cout], fan_in),
        );
        let b = bias
            .then(|| store.add(format!("{name}.b"), ParamKind::Weight, Tensor::zeros(&[cout])));
        Conv2d { w, b, spec }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let w = cx.p(self.w)?;
        let b = match self.b {
            Some(i) => Some(cx.p(i)?),
            None => None,
        };
        cx.tape.conv2d(x, w, b, self.spec)
    }
}

/// Fully-connected layer (weights `[cin, cout]`).
pub struct Linear {
    pub w: PIdx,
    pub b: Option<PIdx>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            he_normal(rng, &[cin, cout], cin),
        );
        let b = bias
            .then(|| store.add(format!("{name}.b"), ParamKind::Weight, Tensor::zeros(&[cout])));
        Linear { w, b }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let w = cx.p(self.w)?;
        let b = match self.b {
            Some(i) => Some(cx.p(i)?),
            None => None,
        };
        cx.tape.linear(x, w, b)
    }
}

/// Per-channel batch normalization with running statistics.
///
/// Training normalizes by the batch's biased statistics and blends them
/// into the running averages as `new = momentum · old + (1 − momentum) ·
/// batch`; evaluation normalizes by the stored averages.
pub struct BatchNorm2d {
    pub gamma: PIdx,
    pub beta: PIdx,
    pub rmean: PIdx,
    pub rvar: PIdx,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamKind::Weight, Tensor::filled(&[c], 1.0));
        let beta = store.add(format!("{name}.beta"), ParamKind::Weight, Tensor::zeros(&[c]));
        let rmean = store.add(format!("{name}.rmean"), ParamKind::Stat, Tensor::zeros(&[c]));
        let rvar = store.add(format!("{name}.rvar"), ParamKind::Stat, Tensor::filled(&[c], 1.0));
        BatchNorm2d { gamma, beta, rmean, rvar, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma)?;
        let beta = cx.p(self.beta)?;
        match cx.phase() {
            Phase::Train => {
                let (mean, var) = ops::bn_stats(cx.tape.value(x))?;
                let blend = |old: &Tensor, new: &Tensor| {
                    Tensor::from_vec(
                        old.shape(),
                        old.data()
                            .iter()
                            .zip(new.data())
                            .map(|(o, n)| self.momentum * o + (1.0 - self.momentum) * n)
                            .collect(),
                    )
                };
                let new_mean = blend(cx.store().value(self.rmean), &mean);
                let new_var = blend(cx.store().value(self.rvar), &var);
                cx.update_stat(self.rmean, new_mean);
                cx.update_stat(self.rvar, new_var);
                cx.tape.batch_norm(x, gamma, beta, mean, var, self.eps, true)
            }
            Phase::Eval => {
                let mean = cx.store().value(self.rmean).clone();
                let var = cx.store().value(self.rvar).clone();
                cx.tape.batch_norm(x, gamma, beta, mean, var, self.eps, false)
            }
        }
    }
}

/// Convolution unit: bias-free convolution → batch norm → ReLU.
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, spec, false);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        ConvUnit { conv, bn }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let c = self.conv.forward(cx, x)?;
        let n = self.bn.forward(cx, c)?;
        Ok(cx.tape.relu(n))
    }
}

/// Scale a base channel count by the width multiplier, flooring at 4 so
/// every layer keeps enough channels to stay meaningful.
pub fn scale_channels(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(4)
}

/// Validate that an input extent can serve as a network input (positive
/// and divisible by the total downsampling factor).
pub fn check_extent(op: &'static str, extent: usize, divisor: usize) -> Result<()> {
    if extent == 0 || extent % divisor != 0 {
        return Err(Error::shape(
            op,
            format!("spatial extent {extent} must be a positive multiple of {divisor}"),
        ));
    }
    Ok(())
}
