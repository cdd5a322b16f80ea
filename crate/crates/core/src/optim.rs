//! Adam optimizer over the parameter store.
//!
//! The optimizer walks every [`ParamKind::Weight`] entry that received a
//! gradient, maintaining per-parameter first and second moment estimates
//! keyed by parameter *name* (names are stable across checkpoint saves
//! and resumed runs, unlike raw indices). Entries without gradients —
//! frozen branches, statistics — are left untouched. Any non-finite
//! gradient or updated value aborts the step naming the parameter, so a
//! diverging run fails loudly instead of poisoning the weights.

use std::collections::BTreeMap;

use crate::layers::{ParamKind, ParamStore};
use crate::{Error, Result};

/// Adam hyperparameters. Defaults: step size 3e-4, momentum 0.9, second
/// moment 0.999, epsilon 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer {name} {b} outside [0,1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optimizer eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state: moments per parameter name plus the global step count.
pub struct Adam {
    pub cfg: AdamConfig,
    pub(crate) moments: BTreeMap<String, Moments>,
    pub(crate) step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, moments: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Read-only view of the moment table, ordered by name.
    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restore state saved by a checkpoint.
    pub fn restore(&mut self, moments: BTreeMap<String, Moments>, step: u64) {
        self.moments = moments;
        self.step = step;
    }

    /// Apply one update using the gradients accumulated in `store`,
    /// then leave the gradients in place (callers clear them per batch).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        let indices: Vec<_> = store.indices().collect();
        for idx in indices {
            if store.kind(idx) != ParamKind::Weight {
                continue;
            }
            let Some(grad) = store.grad(idx) else { continue };
            let grad = grad.data().to_vec();
            let name = store.name(idx).to_string();
            if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} ({bad})")));
            }

            let value = store.value_mut(idx);
            let slot = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] });
            if slot.m.len() != grad.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has {} entries, parameter has {}",
                    slot.m.len(),
                    grad.len()
                )));
            }
            for ((w, &g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                if !w.is_finite() {
                    return Err(Error::NonFinite(format!("parameter {name} after update")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{init_rng, ConvUnit, Cx, ParamKind, ParamStore, Phase};
    use crate::ops::ConvSpec;
    use crate::tensor::Tensor;
    use crate::testutil::{assert_slice_close, rng_tensor, Rng64};

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut store = ParamStore::new();
        let idx = store.add("w", ParamKind::Weight, Tensor::zeros(&[4]));
        let mut adam = Adam::new(cfg);

        // Independent scalar re-implementation of the update rule.
        let mut refw = [0.0f64; 4];
        let (mut m, mut v) = ([0.0f64; 4], [0.0f64; 4]);
        let mut rng = Rng64::new(40);
        for t in 1..=10 {
            let grads: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            store.clear_grads();
            store.accumulate_grad(idx, &Tensor::from_vec(&[4], grads.clone()));
            adam.step(&mut store).unwrap();

            for i in 0..4 {
                m[i] = 0.9 * m[i] + 0.1 * grads[i];
                v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                refw[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            assert_slice_close(store.value(idx).data(), &refw, 1e-15);
        }
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_signed_step_size() {
        // With bias correction, step 1 gives m̂ = g, v̂ = g², so the
        // update is lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut store = ParamStore::new();
        let idx = store.add("w", ParamKind::Weight, Tensor::zeros(&[3]));
        store.accumulate_grad(idx, &Tensor::from_vec(&[3], vec![2.5, -0.3, 1e-3]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        let w = store.value(idx).data();
        assert_slice_close(w, &[-3e-4, 3e-4, -3e-4], 1e-8);
    }

    #[test]
    fn skips_stats_and_gradient_free_weights() {
        let mut store = ParamStore::new();
        let stat = store.add("running", ParamKind::Stat, Tensor::filled(&[2], 5.0));
        let frozen = store.add("frozen", ParamKind::Weight, Tensor::filled(&[2], 1.0));
        let live = store.add("live", ParamKind::Weight, Tensor::filled(&[2], 1.0));
        store.accumulate_grad(stat, &Tensor::filled(&[2], 9.0));
        store.accumulate_grad(live, &Tensor::filled(&[2], 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(stat).data(), &[5.0, 5.0]);
        assert_eq!(store.value(frozen).data(), &[1.0, 1.0]);
        assert!(store.value(live).data()[0] < 1.0);
    }

    #[test]
    fn one_step_decreases_a_frozen_batch_loss() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let unit = ConvUnit::new(&mut store, &mut rng, "probe", 2, 3, ConvSpec::same(3, 1));
        let mut data_rng = Rng64::new(41);
        let x = rng_tensor(&mut data_rng, &[2, 5, 5, 2]);

        let loss_of = |store: &mut ParamStore| -> f64 {
            let mut cx = Cx::frozen(store, Phase::Train);
            let xv = cx.tape.leaf(x.clone(), false).unwrap();
            let out = unit.forward(&mut cx, xv).unwrap();
            let sq = cx.tape.mul(out, out).unwrap();
            let loss = cx.tape.mean(sq);
            cx.tape.value(loss).item()
        };

        let before = loss_of(&mut store);
        {
            let mut cx = Cx::frozen(&mut store, Phase::Train);
            let xv = cx.tape.leaf(x.clone(), false).unwrap();
            let out = unit.forward(&mut cx, xv).unwrap();
            let sq = cx.tape.mul(out, out).unwrap();
            let loss = cx.tape.mean(sq);
            cx.tape.backward(loss).unwrap();
            cx.collect_grads();
        }
        let mut adam = Adam::new(AdamConfig { lr: 1e-4, ..AdamConfig::default() });
        adam.step(&mut store).unwrap();
        let after = loss_of(&mut store);
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut store = ParamStore::new();
        let idx = store.add("exploding", ParamKind::Weight, Tensor::zeros(&[1]));
        store.accumulate_grad(idx, &Tensor::from_vec(&[1], vec![f64::NAN]));
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("exploding"), "got: {err}");
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }
}
