//! The harmonic loss family, comparator losses, and the composite
//! training objective.
//!
//! The harmonic loss interpolates between two classical pixel losses
//! through its shift parameter σ:
//!
//! ```text
//! L(p_t) = −(1+σ)·(1−p_t)^{γ−1} / (σ + (1−p_t)^γ) · ln(p_t)
//! ```
//!
//! As σ → 0 it approaches `−(1−p_t)^{−1}·ln(p_t)` — a loss that *grows*
//! with confidence on hard pixels — and as σ → ∞ it approaches the
//! focal form `−(1−p_t)^{γ−1}·ln(p_t)`. Between the two, σ controls how
//! strongly well-classified pixels are damped. The module provides:
//!
//! * scalar evaluations of the harmonic loss, its closed-form limits,
//!   cross-entropy and focal comparators, and top-k / unified-focal
//!   baselines (standard formulations, included only for comparison
//!   harnesses);
//! * analytic derivatives and the four truncated polynomial series for
//!   `−dL/dp_t` used to validate them;
//! * tape builders for the Dice loss, the weighted harmonic pixel loss,
//!   and the full composite objective
//!   `λ1·Dice(S^f, Y) + λ2·Dice(S^b, 1−Y) + λ3·(Dice(Ŷ, Y) + λ4·harmonic)`.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probabilities are clamped to this interior band before logarithms.
pub const P_CLAMP: f64 = 1e-7;

/// Hyper-parameters of the composite objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Harmonic exponent γ.
    pub gamma: f64,
    /// Harmonic shift σ ≥ 0.
    pub sigma: f64,
    /// Foreground class weight α ∈ [0, 1].
    pub alpha: f64,
    /// Weight of the foreground-saliency Dice term.
    pub lambda1: f64,
    /// Weight of the background-saliency Dice term.
    pub lambda2: f64,
    /// Weight of the coupling (final prediction) terms.
    pub lambda3: f64,
    /// Weight of the harmonic term inside the coupling group.
    pub lambda4: f64,
    /// Dice smoothing constant.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 5.0,
            sigma: 1e-3,
            alpha: 0.25,
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 1.0,
            lambda4: 10.0,
            eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {l}")));
            }
        }
        if !(self.eps > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("eps must be positive and gamma finite".into()));
        }
        Ok(())
    }
}

fn check_pt(p_t: f64) -> Result<()> {
    if !(p_t > 0.0 && p_t < 1.0) {
        return Err(Error::Config(format!("p_t = {p_t} outside (0,1)")));
    }
    Ok(())
}

/// The harmonic loss at a single pixel probability.
pub fn harmonic_loss(p_t: f64, gamma: f64, sigma: f64) -> Result<f64> {
    check_pt(p_t)?;
    let u = 1.0 - p_t;
    Ok(-(1.0 + sigma) * u.powf(gamma - 1.0) / (sigma + u.powf(gamma)) * p_t.ln())
}

/// Weighted harmonic loss for a pixel with estimated foreground
/// probability `p` and binary label `y`: `α_t · L(p_t)` with `p_t = p`
/// for foreground pixels and `1 − p` otherwise, `α_t = α` resp. `1 − α`.
pub fn weighted_harmonic_loss(p: f64, y: f64, cfg: &LossConfig) -> Result<f64> {
    let p_t = if y == 1.0 { p } else { 1.0 - p };
    let alpha_t = if y == 1.0 { cfg.alpha } else { 1.0 - cfg.alpha };
    Ok(alpha_t * harmonic_loss(p_t, cfg.gamma, cfg.sigma)?)
}

/// Closed-form σ → 0 limit: `−(1−p_t)^{−1}·ln(p_t)`.
pub fn harmonic_limit_sigma0(p_t: f64) -> Result<f64> {
    check_pt(p_t)?;
    Ok(-p_t.ln() / (1.0 - p_t))
}

/// Closed-form σ → ∞ limit: `−(1−p_t)^{γ−1}·ln(p_t)`.
pub fn harmonic_limit_sigma_inf(p_t: f64, gamma: f64) -> Result<f64> {
    check_pt(p_t)?;
    Ok(-(1.0 - p_t).powf(gamma - 1.0) * p_t.ln())
}

/// Cross-entropy comparator `−ln(p_t)`.
pub fn ce_loss(p_t: f64) -> Result<f64> {
    check_pt(p_t)?;
    Ok(-p_t.ln())
}

/// Focal comparator `(1−p_t)^γ · (−ln p_t)`.
pub fn focal_loss(p_t: f64, gamma: f64) -> Result<f64> {
    check_pt(p_t)?;
    Ok((1.0 - p_t).powf(gamma) * -p_t.ln())
}

/// Analytic `−dL/dp_t` of the harmonic loss.
pub fn harmonic_dldp(p_t: f64, gamma: f64, sigma: f64) -> Result<f64> {
    check_pt(p_t)?;
    let u = 1.0 - p_t;
    let den = sigma + u.powf(gamma);
    let a = (1.0 + sigma) * u.powf(gamma - 1.0) / den;
    // dA/du, then dA/dp = −dA/du.
    let da_du = (1.0 + sigma) * u.powf(gamma - 2.0) * ((gamma - 1.0) * sigma - u.powf(gamma))
        / (den * den);
    Ok(-da_du * p_t.ln() + a / p_t)
}

/// Analytic `−dL/dp_t` of cross-entropy: `1/p_t`.
pub fn ce_dldp(p_t: f64) -> Result<f64> {
    check_pt(p_t)?;
    Ok(1.0 / p_t)
}

/// Analytic `−dL/dp_t` of the focal loss.
pub fn focal_dldp(p_t: f64, gamma: f64) -> Result<f64> {
    check_pt(p_t)?;
    let u = 1.0 - p_t;
    Ok(-gamma * u.powf(gamma - 1.0) * p_t.ln() + u.powf(gamma) / p_t)
}

/// Analytic `−dL/dp_t` of the σ → 0 harmonic limit.
pub fn harmonic_sigma0_dldp(p_t: f64) -> Result<f64> {
    check_pt(p_t)?;
    let u = 1.0 - p_t;
    Ok(p_t.ln() / (u * u) + 1.0 / (p_t * u))
}

/// Analytic `−dL/dp_t` of the σ → ∞ harmonic limit (focal with γ−1).
pub fn harmonic_sigma_inf_dldp(p_t: f64, gamma: f64) -> Result<f64> {
    focal_dldp(p_t, gamma - 1.0)
}

/// Which gradient series to expand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    /// Cross-entropy: coefficients 1, exponents j−1.
    Ce,
    /// Harmonic σ → 0 limit: coefficients (j−1)/j, exponents j−2.
    HarmonicSigma0,
    /// Focal: coefficients 1+γ/j, exponents j+γ−1.
    Focal,
    /// Harmonic σ → ∞ limit: the focal series with γ shifted down by 1.
    HarmonicSigmaInf,
}

/// The j-th term (j ≥ 1) of the polynomial expansion of `−dL/dp_t`.
pub fn series_term(kind: SeriesKind, p_t: f64, gamma: f64, j: usize) -> f64 {
    let u = 1.0 - p_t;
    let jf = j as f64;
    match kind {
        SeriesKind::Ce => u.powf(jf - 1.0),
        SeriesKind::HarmonicSigma0 => {
            if j == 1 {
                0.0
            } else {
                (jf - 1.0) / jf * u.powf(jf - 2.0)
            }
        }
        SeriesKind::Focal => (1.0 + gamma / jf) * u.powf(jf + gamma - 1.0),
        SeriesKind::HarmonicSigmaInf => {
            (1.0 + (gamma - 1.0) / jf) * u.powf(jf + gamma - 2.0)
        }
    }
}

/// Truncated polynomial series for `−dL/dp_t` of the requested loss.
pub fn gradient_series(kind: SeriesKind, p_t: f64, gamma: f64, terms: usize) -> Result<f64> {
    check_pt(p_t)?;
    if terms == 0 {
        return Err(Error::Config("series needs at least one term".into()));
    }
    Ok((1..=terms).map(|j| series_term(kind, p_t, gamma, j)).sum())
}

/// Top-k cross-entropy baseline: the mean of the largest `⌈k·N⌉`
/// per-pixel cross-entropy values. Standard hard-example-mining
/// formulation, provided only as a comparison baseline.
pub fn topk_loss(p: &Tensor, y: &Tensor, k: f64) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::shape("topk_loss", "probability and label shapes differ"));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("top-k fraction {k} outside (0,1]")));
    }
    let mut ces: Vec<f64> = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| {
            let pt = if yv == 1.0 { pv } else { 1.0 - pv };
            -pt.clamp(P_CLAMP, 1.0 - P_CLAMP).ln()
        })
        .collect();
    let keep = ((k * ces.len() as f64).ceil() as usize).clamp(1, ces.len());
    ces.sort_by(|a, b| b.partial_cmp(a).expect("finite losses"));
    Ok(ces[..keep].iter().sum::<f64>() / keep as f64)
}

/// Unified focal baseline: a convex blend of an asymmetrically weighted
/// focal cross-entropy and a focal Tversky term. Standard formulation,
/// provided only as a comparison baseline.
pub fn unified_focal_loss(
    p: &Tensor,
    y: &Tensor,
    lambda: f64,
    delta: f64,
    gamma: f64,
) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::shape("unified_focal_loss", "probability and label shapes differ"));
    }
    let n = p.data().len() as f64;
    let mut focal_ce = 0.0;
    let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        let pt = if yv == 1.0 { pv } else { 1.0 - pv };
        let dt = if yv == 1.0 { delta } else { 1.0 - delta };
        let pt = pt.clamp(P_CLAMP, 1.0 - P_CLAMP);
        focal_ce += dt * (1.0 - pt).powf(gamma) * -pt.ln();
        tp += pv * yv;
        fn_ += (1.0 - pv) * yv;
        fp += pv * (1.0 - yv);
    }
    focal_ce /= n;
    let eps = 1e-7;
    let tversky = (tp + eps) / (tp + delta * fn_ + (1.0 - delta) * fp + eps);
    Ok(lambda * focal_ce + (1.0 - lambda) * (1.0 - tversky).powf(gamma))
}

/// Build the Dice loss `1 − (2·Σ(p·y) + ε)/(Σp + Σy + ε)` on the tape.
/// Sums pool the whole tensor, so a batch is treated as one population.
pub fn dice_loss_graph(t: &mut Tape, p: Var, y: &Tensor, eps: f64) -> Result<Var> {
    if t.value(p).shape() != y.shape() {
        return Err(Error::shape("dice_loss", "probability and label shapes differ"));
    }
    let yv = t.leaf(y.clone(), false)?;
    let py = t.mul(p, yv)?;
    let inter = t.sum(py);
    let num = {
        let two = t.mul_scalar(inter, 2.0);
        t.add_scalar(two, eps)
    };
    let sp = t.sum(p);
    let sy = t.sum(yv);
    let den = {
        let s = t.add(sp, sy)?;
        t.add_scalar(s, eps)
    };
    let frac = t.div(num, den)?;
    let neg = t.mul_scalar(frac, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Build the mean weighted harmonic pixel loss on the tape. `p` holds
/// foreground probabilities; `y` the binary mask. Probabilities are
/// clamped to the interior band before the logarithm.
pub fn harmonic_loss_graph(t: &mut Tape, p: Var, y: &Tensor, cfg: &LossConfig) -> Result<Var> {
    if t.value(p).shape() != y.shape() {
        return Err(Error::shape("harmonic_loss", "probability and label shapes differ"));
    }
    let yv = t.leaf(y.clone(), false)?;
    let y_not = Tensor::from_vec(y.shape(), y.data().iter().map(|v| 1.0 - v).collect());
    let ynv = t.leaf(y_not, false)?;
    let alpha_t = Tensor::from_vec(
        y.shape(),
        y.data()
            .iter()
            .map(|&v| if v == 1.0 { cfg.alpha } else { 1.0 - cfg.alpha })
            .collect(),
    );
    let av = t.leaf(alpha_t, false)?;

    let pc = t.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let one_minus = {
        let n = t.mul_scalar(pc, -1.0);
        t.add_scalar(n, 1.0)
    };
    let p_t = {
        let a = t.mul(pc, yv)?;
        let b = t.mul(one_minus, ynv)?;
        t.add(a, b)?
    };
    let u = {
        let n = t.mul_scalar(p_t, -1.0);
        t.add_scalar(n, 1.0)
    };
    let num = {
        let e = t.pow_scalar(u, cfg.gamma - 1.0);
        t.mul_scalar(e, 1.0 + cfg.sigma)
    };
    let den = {
        let e = t.pow_scalar(u, cfg.gamma);
        t.add_scalar(e, cfg.sigma)
    };
    let frac = t.div(num, den)?;
    let lp = t.ln(p_t);
    let pixel = {
        let fl = t.mul(frac, lp)?;
        let w = t.mul(fl, av)?;
        t.mul_scalar(w, -1.0)
    };
    Ok(t.mean(pixel))
}

/// Readable values of the composite loss terms (unweighted).
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub dice_f: f64,
    pub dice_b: f64,
    pub dice_c: f64,
    pub harmonic: f64,
}

/// Build the full objective
/// `λ1·Dice(S^f, Y) + λ2·Dice(S^b, 1−Y) + λ3·(Dice(Ŷ, Y) + λ4·harmonic)`.
pub fn total_loss_graph(
    t: &mut Tape,
    s_f: Var,
    s_b: Var,
    y_hat: Var,
    y: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let y_bg = Tensor::from_vec(y.shape(), y.data().iter().map(|v| 1.0 - v).collect());
    let d_f = dice_loss_graph(t, s_f, y, cfg.eps)?;
    let d_b = dice_loss_graph(t, s_b, &y_bg, cfg.eps)?;
    let d_c = dice_loss_graph(t, y_hat, y, cfg.eps)?;
    let h = harmonic_loss_graph(t, y_hat, y, cfg)?;
    let breakdown = LossBreakdown {
        dice_f: t.value(d_f).item(),
        dice_b: t.value(d_b).item(),
        dice_c: t.value(d_c).item(),
        harmonic: t.value(h).item(),
    };
    let t1 = t.mul_scalar(d_f, cfg.lambda1);
    let t2 = t.mul_scalar(d_b, cfg.lambda2);
    let hh = t.mul_scalar(h, cfg.lambda4);
    let inner = t.add(d_c, hh)?;
    let t3 = t.mul_scalar(inner, cfg.lambda3);
    let t12 = t.add(t1, t2)?;
    let total = t.add(t12, t3)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckCfg};
    use crate::layers::ParamStore;
    use crate::testutil::{assert_close, Rng64};

    #[test]
    fn harmonic_matches_reference_points() {
        let l = harmonic_loss(0.5, 5.0, 1e-12).unwrap();
        assert_close(l, 1.386_294_3, 1e-6);
        let l = harmonic_loss(0.5, 2.0, 1e12).unwrap();
        assert_close(l, 0.346_573_5, 1e-6);
        // p_t → 1⁻: numerator (1−p)^{γ−1} and −ln p both vanish.
        assert!(harmonic_loss(1.0 - 1e-9, 5.0, 1e-3).unwrap() < 1e-6);
        assert!(harmonic_loss(0.0, 5.0, 1e-3).is_err());
        assert!(harmonic_loss(1.0, 5.0, 1e-3).is_err());
        assert!(harmonic_loss(-0.2, 5.0, 1e-3).is_err());
    }

    #[test]
    fn comparators_match_hand_values() {
        assert_eq!(ce_loss(1.0 / std::f64::consts::E).unwrap(), 1.0);
        assert_close(focal_loss(0.5, 2.0).unwrap(), 0.17329, 1e-5);
        for k in 1..20 {
            let p = k as f64 * 0.05;
            assert_eq!(focal_loss(p, 0.0).unwrap(), ce_loss(p).unwrap());
        }
    }

    #[test]
    fn limits_match_closed_forms() {
        for &gamma in &[2.0, 5.0, 9.0] {
            // The σ → 0 deviation scales as σ·(1−p_t)^{−γ−1}, so tight
            // agreement is asserted on the lower half of the range where
            // that factor stays bounded.
            for k in 1..10 {
                let p = k as f64 * 0.05;
                let l0 = harmonic_limit_sigma0(p).unwrap();
                assert_close(harmonic_loss(p, gamma, 1e-10).unwrap(), l0, 1e-6);
            }
            // The σ → ∞ deviation shrinks as 1/σ everywhere.
            for k in 1..10 {
                let p = k as f64 * 0.1;
                let li = harmonic_limit_sigma_inf(p, gamma).unwrap();
                assert_close(harmonic_loss(p, gamma, 1e10).unwrap(), li, 1e-6);
            }
        }
    }

    #[test]
    fn limit_approach_is_monotone() {
        for k in 1..10 {
            let p = k as f64 * 0.1;
            let l0 = harmonic_limit_sigma0(p).unwrap();
            let mut last = f64::INFINITY;
            for &s in &[1e-2, 1e-4, 1e-6, 1e-8] {
                let gap = (harmonic_loss(p, 5.0, s).unwrap() - l0).abs();
                assert!(gap <= last + 1e-15, "gap grew at p={p}, sigma={s}");
                last = gap;
            }
            let li = harmonic_limit_sigma_inf(p, 5.0).unwrap();
            let mut last = f64::INFINITY;
            for &s in &[1e2, 1e4, 1e6, 1e8] {
                let gap = (harmonic_loss(p, 5.0, s).unwrap() - li).abs();
                assert!(gap <= last + 1e-15, "gap grew at p={p}, sigma={s}");
                last = gap;
            }
        }
    }

    #[test]
    fn plateau_amplification_factors() {
        for k in 1..10 {
            let p = k as f64 * 0.1;
            let gamma = 5.0;
            let u = 1.0 - p;
            // σ far below (1−p_t)^γ: the loss sits at (1+σ)× the σ→0 limit.
            let s = 1e-4 * u.powf(gamma);
            let ratio =
                harmonic_loss(p, gamma, s).unwrap() / harmonic_limit_sigma0(p).unwrap();
            assert!((ratio / (1.0 + s) - 1.0).abs() < 1e-3, "low plateau off at p={p}");
            // σ far above (1−p_t)^γ: the loss sits at (1+σ)/σ × the σ→∞ limit.
            let s = 1e4 * u.powf(gamma);
            let ratio = harmonic_loss(p, gamma, s).unwrap()
                / harmonic_limit_sigma_inf(p, gamma).unwrap();
            assert!(
                (ratio / ((1.0 + s) / s) - 1.0).abs() < 1e-3,
                "high plateau off at p={p}"
            );
        }
    }

    #[test]
    fn nonnegative_and_smooth_on_grid() {
        for &gamma in &[2.0, 5.0, 9.0] {
            for &sigma in &[1e-3, 1.0, 10.0] {
                for k in 1..100 {
                    let p = k as f64 * 0.01;
                    let l = harmonic_loss(p, gamma, sigma).unwrap();
                    assert!(l >= 0.0, "negative loss at p={p}, γ={gamma}, σ={sigma}");
                    // Central difference of the loss matches the
                    // analytic derivative — the curve is smooth.
                    let h = 1e-6;
                    let fd = (harmonic_loss(p + h, gamma, sigma).unwrap()
                        - harmonic_loss(p - h, gamma, sigma).unwrap())
                        / (2.0 * h);
                    let an = -harmonic_dldp(p, gamma, sigma).unwrap();
                    let denom = an.abs().max(1.0);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-5,
                        "kinked at p={p}, γ={gamma}, σ={sigma}: fd {fd}, analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn figure_orderings_hold_numerically() {
        let h = harmonic_loss(0.5, 5.0, 1e-3).unwrap();
        assert!(h > focal_loss(0.5, 2.0).unwrap());
        let h99 = harmonic_loss(0.99, 5.0, 1e-3).unwrap();
        assert!(h99 < ce_loss(0.99).unwrap());
    }

    #[test]
    fn gradient_series_converges_to_analytic() {
        // Spec'd example points first.
        assert_close(gradient_series(SeriesKind::Ce, 0.5, 0.0, 50).unwrap(), 2.0, 1e-12);
        assert_close(
            gradient_series(SeriesKind::HarmonicSigma0, 0.9, 0.0, 100).unwrap(),
            harmonic_sigma0_dldp(0.9).unwrap(),
            1e-6,
        );
        assert_close(
            gradient_series(SeriesKind::Focal, 0.7, 2.0, 200).unwrap(),
            focal_dldp(0.7, 2.0).unwrap(),
            1e-6,
        );
        // Whole family over the probe grid, 500 terms.
        for &p in &[0.3, 0.5, 0.7, 0.9] {
            assert_close(
                gradient_series(SeriesKind::Ce, p, 0.0, 500).unwrap(),
                ce_dldp(p).unwrap(),
                1e-6,
            );
            assert_close(
                gradient_series(SeriesKind::HarmonicSigma0, p, 0.0, 500).unwrap(),
                harmonic_sigma0_dldp(p).unwrap(),
                1e-6,
            );
            for &g in &[2.0, 5.0] {
                assert_close(
                    gradient_series(SeriesKind::Focal, p, g, 500).unwrap(),
                    focal_dldp(p, g).unwrap(),
                    1e-6,
                );
                assert_close(
                    gradient_series(SeriesKind::HarmonicSigmaInf, p, g, 500).unwrap(),
                    harmonic_sigma_inf_dldp(p, g).unwrap(),
                    1e-6,
                );
            }
        }
        assert!(gradient_series(SeriesKind::Ce, 0.0, 0.0, 10).is_err());
        assert!(gradient_series(SeriesKind::Ce, 0.5, 0.0, 0).is_err());
    }

    #[test]
    fn coefficient_shift_identity_is_bitwise() {
        for &p in &[0.3, 0.5, 0.7, 0.9] {
            for j in 1..=500 {
                let shifted = series_term(SeriesKind::HarmonicSigmaInf, p, 5.0, j);
                let focal = series_term(SeriesKind::Focal, p, 4.0, j);
                assert_eq!(shifted.to_bits(), focal.to_bits(), "j={j}, p={p}");
            }
        }
    }

    #[test]
    fn dice_handles_perfect_disjoint_and_soft_cases() {
        let mut t = Tape::new();
        let y = Tensor::from_vec(&[1, 2, 4, 1], vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let p = t.leaf(y.clone(), false).unwrap();
        let d = dice_loss_graph(&mut t, p, &y, 1.0).unwrap();
        assert_eq!(t.value(d).item(), 0.0);

        // Fully disjoint prediction: 1 − ε/(Σp + Σy + ε).
        let flip = Tensor::from_vec(y.shape(), y.data().iter().map(|v| 1.0 - v).collect());
        let pf = t.leaf(flip, false).unwrap();
        let d = dice_loss_graph(&mut t, pf, &y, 1.0).unwrap();
        assert_close(t.value(d).item(), 1.0 - 1.0 / 9.0, 1e-12);

        // Soft 4×4 hand example against an explicit loop.
        let mut rng = Rng64::new(80);
        let soft: Vec<f64> = (0..16).map(|_| rng.uniform(0.05, 0.95)).collect();
        let mask: Vec<f64> = (0..16).map(|i| f64::from(i % 3 == 0)).collect();
        let yt = Tensor::from_vec(&[1, 4, 4, 1], mask.clone());
        let pt = Tensor::from_vec(&[1, 4, 4, 1], soft.clone());
        let pv = t.leaf(pt, false).unwrap();
        let d = dice_loss_graph(&mut t, pv, &yt, 1.0).unwrap();
        let inter: f64 = soft.iter().zip(&mask).map(|(a, b)| a * b).sum();
        let want = 1.0
            - (2.0 * inter + 1.0)
                / (soft.iter().sum::<f64>() + mask.iter().sum::<f64>() + 1.0);
        assert_close(t.value(d).item(), want, 1e-12);

        // Shape mismatch rejected.
        let bad = t.leaf(Tensor::zeros(&[1, 2, 2, 1]), false).unwrap();
        assert!(dice_loss_graph(&mut t, bad, &yt, 1.0).is_err());
    }

    #[test]
    fn harmonic_graph_averages_weighted_pixels() {
        let mut t = Tape::new();
        let cfg = LossConfig::default();
        let y = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 0.0]);
        let p = t.leaf(Tensor::from_vec(&[1, 1, 2, 1], vec![0.7, 0.4]), false).unwrap();
        let hv = harmonic_loss_graph(&mut t, p, &y, &cfg).unwrap();
        let h = t.value(hv).item();
        let px1 = 0.25 * harmonic_loss(0.7, cfg.gamma, cfg.sigma).unwrap();
        let px2 = 0.75 * harmonic_loss(0.6, cfg.gamma, cfg.sigma).unwrap();
        assert_close(h, (px1 + px2) / 2.0, 1e-12);
    }

    #[test]
    fn total_loss_composes_and_collapses() {
        let mut rng = Rng64::new(81);
        let shape = [2, 4, 4, 1];
        let numel = 32;
        let sf = Tensor::from_vec(&shape, (0..numel).map(|_| rng.uniform(0.05, 0.95)).collect());
        let sb = Tensor::from_vec(&shape, (0..numel).map(|_| rng.uniform(0.05, 0.95)).collect());
        let yh = Tensor::from_vec(&shape, (0..numel).map(|_| rng.uniform(0.05, 0.95)).collect());
        let y = Tensor::from_vec(&shape, (0..numel).map(|i| f64::from(i % 4 == 0)).collect());

        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let sfv = t.leaf(sf.clone(), false).unwrap();
        let sbv = t.leaf(sb.clone(), false).unwrap();
        let yhv = t.leaf(yh.clone(), false).unwrap();
        let (total, bd) = total_loss_graph(&mut t, sfv, sbv, yhv, &y, &cfg).unwrap();
        let total = t.value(total).item();

        // Straight-line recomputation with independent loops.
        let dice = |p: &Tensor, y: &Tensor| {
            let inter: f64 = p.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let sums: f64 = p.data().iter().sum::<f64>() + y.data().iter().sum::<f64>();
            1.0 - (2.0 * inter + 1.0) / (sums + 1.0)
        };
        let y_bg = Tensor::from_vec(&shape, y.data().iter().map(|v| 1.0 - v).collect());
        let mut harm = 0.0;
        for (pv, yv) in yh.data().iter().zip(y.data()) {
            harm += weighted_harmonic_loss(*pv, *yv, &cfg).unwrap();
        }
        harm /= numel as f64;
        assert_close(bd.dice_f, dice(&sf, &y), 1e-12);
        assert_close(bd.dice_b, dice(&sb, &y_bg), 1e-12);
        assert_close(bd.dice_c, dice(&yh, &y), 1e-12);
        assert_close(bd.harmonic, harm, 1e-12);
        let want = 0.5 * bd.dice_f + 0.5 * bd.dice_b + 1.0 * (bd.dice_c + 10.0 * bd.harmonic);
        assert_close(total, want, 1e-12);

        // λ3 = 0 keeps only the decomposition terms, exactly.
        let cfg0 = LossConfig { lambda3: 0.0, ..LossConfig::default() };
        let mut t = Tape::new();
        let sfv = t.leaf(sf.clone(), false).unwrap();
        let sbv = t.leaf(sb.clone(), false).unwrap();
        let yhv = t.leaf(yh.clone(), false).unwrap();
        let (total0, bd0) = total_loss_graph(&mut t, sfv, sbv, yhv, &y, &cfg0).unwrap();
        let got = t.value(total0).item();
        assert_eq!(got, 0.5 * bd0.dice_f + 0.5 * bd0.dice_b);
    }

    #[test]
    fn perfect_prediction_total_is_small() {
        let shape = [1, 4, 4, 1];
        let y = Tensor::from_vec(&shape, (0..16).map(|i| f64::from(i < 6)).collect());
        let near = |v: f64| if v == 1.0 { 1.0 - 1e-6 } else { 1e-6 };
        let sf = Tensor::from_vec(&shape, y.data().iter().map(|&v| near(v)).collect());
        // The background stream predicts the complement mask.
        let sb = Tensor::from_vec(&shape, y.data().iter().map(|&v| near(1.0 - v)).collect());
        let mut t = Tape::new();
        let sfv = t.leaf(sf.clone(), false).unwrap();
        let sbv = t.leaf(sb, false).unwrap();
        let yhv = t.leaf(sf, false).unwrap();
        let (total, _) =
            total_loss_graph(&mut t, sfv, sbv, yhv, &y, &LossConfig::default()).unwrap();
        let v = t.value(total).item();
        assert!((0.0..0.01).contains(&v), "total {v} not within smoothing slack of zero");
    }

    #[test]
    fn autodiff_gradient_matches_symbolic_on_grid() {
        let cfg = LossConfig::default();
        let mut k = 1;
        while k <= 99 {
            let p = k as f64 * 0.01;
            let mut t = Tape::new();
            let pv = t.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![p]), true).unwrap();
            let y = Tensor::filled(&[1, 1, 1, 1], 1.0);
            let h = harmonic_loss_graph(&mut t, pv, &y, &cfg).unwrap();
            t.backward(h).unwrap();
            let got = t.grad(pv).unwrap().data()[0];
            // For y = 1 the pixel loss is α·L(p); its derivative is
            // −α·(−dL/dp).
            let want = -cfg.alpha * harmonic_dldp(p, cfg.gamma, cfg.sigma).unwrap();
            assert_close(got, want, 1e-8);
            k += 1;
        }
    }

    #[test]
    fn loss_graphs_pass_gradcheck() {
        let mut rng = Rng64::new(82);
        let shape = [1, 2, 2, 1];
        let logits = Tensor::from_vec(&shape, vec![0.3, -0.7, 1.1, -0.2]);
        let y = Tensor::from_vec(&shape, vec![1.0, 0.0, 0.0, 1.0]);
        let cfg = LossConfig::default();
        let mut store = ParamStore::new();
        let report = gradcheck(
            &mut store,
            &[logits],
            |cx, v| {
                let p = cx.tape.sigmoid(v[0]);
                harmonic_loss_graph(&mut cx.tape, p, &y, &cfg)
            },
            &GradcheckCfg::default(),
        )
        .unwrap();
        assert!(report.pass(), "harmonic: {}", report.worst);

        let soft = Tensor::from_vec(&shape, (0..4).map(|_| rng.uniform(0.05, 0.95)).collect());
        let report = gradcheck(
            &mut store,
            &[soft.clone()],
            |cx, v| dice_loss_graph(&mut cx.tape, v[0], &y, 1.0),
            &GradcheckCfg::default(),
        )
        .unwrap();
        assert!(report.pass(), "dice: {}", report.worst);

        let sf = Tensor::from_vec(&shape, (0..4).map(|_| rng.uniform(0.05, 0.95)).collect());
        let sb = Tensor::from_vec(&shape, (0..4).map(|_| rng.uniform(0.05, 0.95)).collect());
        let report = gradcheck(
            &mut store,
            &[sf, sb, soft],
            |cx, v| {
                let (total, _) = total_loss_graph(&mut cx.tape, v[0], v[1], v[2], &y, &cfg)?;
                Ok(total)
            },
            &GradcheckCfg::default(),
        )
        .unwrap();
        assert!(report.pass(), "total: {}", report.worst);
    }

    #[test]
    fn baselines_behave_sanely() {
        let y = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let good = Tensor::from_vec(&[1, 2, 2, 1], vec![0.9, 0.1, 0.1, 0.9]);
        let bad = Tensor::from_vec(&[1, 2, 2, 1], vec![0.4, 0.6, 0.6, 0.4]);
        // Full-population top-k equals the mean cross-entropy; every
        // pixel of `good` has p_t = 0.9.
        let tk = topk_loss(&good, &y, 1.0).unwrap();
        assert_close(tk, -f64::ln(0.9), 1e-12);
        // A k < 1 keeps only the hardest pixels, so the loss can only grow.
        assert!(topk_loss(&bad, &y, 0.5).unwrap() >= topk_loss(&bad, &y, 1.0).unwrap());
        // Unified focal prefers the better prediction.
        let uf_good = unified_focal_loss(&good, &y, 0.5, 0.6, 0.5).unwrap();
        let uf_bad = unified_focal_loss(&bad, &y, 0.5, 0.6, 0.5).unwrap();
        assert!(uf_good < uf_bad);
        assert!(topk_loss(&good, &y, 0.0).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = LossConfig::default();
        cfg.sigma = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::default();
        cfg.lambda4 = -0.1;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
