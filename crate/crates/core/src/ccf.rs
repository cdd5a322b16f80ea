//! Cross-correlation fusion (CCF) of encoder and decoder features.
//!
//! Instead of plain skip concatenation, CCF weighs the channels of both
//! streams by how strongly they correlate with the other stream:
//!
//! 1. The decoder feature is upsampled ×2 to the encoder's extent.
//! 2. Both maps are flattened to `hw×c` and the channel relation matrix
//!    `M = (1/hw) · X̃_Eᵀ × X̃_D` is formed per sample — entry `(p, q)` is
//!    the (scaled) correlation of encoder channel p with decoder channel
//!    q. The 1/hw factor keeps ω magnitudes resolution-independent.
//! 3. Two bias-free, activation-free length-c kernels ρ_E and ρ_D reduce
//!    M to the global relation vectors: `ω_E[p] = ⟨M[p, ·], ρ_E⟩` (rows)
//!    and `ω_D[q] = ⟨M[·, q], ρ_D⟩` (columns). The two kernels are
//!    independent — one per direction.
//! 4. Each stream is scaled channel-wise by its vector, the results are
//!    concatenated, and a 3×3 convolution unit merges them.
//!
//! [`relation_matrix`] and [`global_relation_vectors`] are the standalone
//! reference implementations used by the oracles; [`CcfFusion`] is the
//! differentiable layer built on the tape.

use rand_chacha::ChaCha8Rng;

use crate::layers::{he_normal, ConvUnit, Cx, ParamKind, ParamStore, PIdx};
use crate::ops::ConvSpec;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Reference relation matrix: `[n, c, c]` with entry
/// `M[i][p][q] = (1/hw) Σ_pixels X_E[i,·,p] · X_D_up[i,·,q]`.
pub fn relation_matrix(xe: &Tensor, xd_up: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = xe.dims4("relation_matrix")?;
    if xd_up.shape() != xe.shape() {
        return Err(Error::shape(
            "relation_matrix",
            format!("operand shapes {:?} vs {:?}", xe.shape(), xd_up.shape()),
        ));
    }
    let hw = h * w;
    let mut m = Tensor::zeros(&[n, c, c]);
    let md = m.data_mut();
    for i in 0..n {
        for pix in 0..hw {
            let base = (i * hw + pix) * c;
            for p in 0..c {
                let e = xe.data()[base + p];
                if e == 0.0 {
                    continue;
                }
                for q in 0..c {
                    md[(i * c + p) * c + q] += e * xd_up.data()[base + q];
                }
            }
        }
    }
    let scale = 1.0 / hw as f64;
    for v in m.data_mut() {
        *v *= scale;
    }
    Ok(m)
}

/// Reference global relation vectors for a single `[c, c]` matrix:
/// `ω_E[p] = ⟨M[p,·], ρ_E⟩` and `ω_D[q] = ⟨M[·,q], ρ_D⟩`.
pub fn global_relation_vectors(
    m: &Tensor,
    rho_e: &Tensor,
    rho_d: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = m.dims2("global_relation_vectors")?;
    if rows != cols {
        return Err(Error::shape(
            "global_relation_vectors",
            format!("relation matrix must be square, got {rows}×{cols}"),
        ));
    }
    let c = rows;
    if rho_e.shape() != [c] || rho_d.shape() != [c] {
        return Err(Error::shape(
            "global_relation_vectors",
            format!(
                "kernel lengths {:?}/{:?} do not match {c} channels",
                rho_e.shape(),
                rho_d.shape()
            ),
        ));
    }
    let mut we = Tensor::zeros(&[c]);
    let mut wd = Tensor::zeros(&[c]);
    for p in 0..c {
        we.data_mut()[p] = (0..c).map(|q| m.data()[p * c + q] * rho_e.data()[q]).sum();
    }
    for q in 0..c {
        wd.data_mut()[q] = (0..c).map(|p| m.data()[p * c + q] * rho_d.data()[p]).sum();
    }
    Ok((we, wd))
}

/// The CCF layer: relation-weighted fusion of an encoder feature with a
/// half-resolution decoder feature, merged by a 3×3 convolution unit.
pub struct CcfFusion {
    pub rho_e: PIdx,
    pub rho_d: PIdx,
    pub merge: ConvUnit,
    pub channels: usize,
}

impl CcfFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        out_channels: usize,
    ) -> Self {
        let rho_e = store.add(
            format!("{name}.rho_e"),
            ParamKind::Weight,
            he_normal(rng, &[channels, 1], channels),
        );
        let rho_d = store.add(
            format!("{name}.rho_d"),
            ParamKind::Weight,
            he_normal(rng, &[channels, 1], channels),
        );
        let merge = ConvUnit::new(
            store,
            rng,
            &format!("{name}.merge"),
            2 * channels,
            out_channels,
            ConvSpec::same(3, 1),
        );
        CcfFusion { rho_e, rho_d, merge, channels }
    }

    /// `xe`: `[n, h, w, c]`; `xd`: `[n, h/2, w/2, c]` → `[n, h, w, c_out]`.
    pub fn forward(&self, cx: &mut Cx, xe: Var, xd: Var) -> Result<Var> {
        let (n, h, w, c) = cx.tape.value(xe).dims4("ccf")?;
        let (nd, hd, wd_, cd) = cx.tape.value(xd).dims4("ccf")?;
        if c != self.channels || cd != self.channels {
            return Err(Error::shape(
                "ccf",
                format!("channel counts {c}/{cd} do not match configured {}", self.channels),
            ));
        }
        if nd != n || h != 2 * hd || w != 2 * wd_ {
            return Err(Error::shape(
                "ccf",
                format!(
                    "encoder extent {h}×{w} must be exactly twice decoder extent {hd}×{wd_}"
                ),
            ));
        }
        let up = cx.tape.upsample(xd, 2)?;
        let xe_flat = cx.tape.reshape(xe, &[n, h * w, c])?;
        let up_flat = cx.tape.reshape(up, &[n, h * w, c])?;
        let m_raw = cx.tape.bmm(xe_flat, up_flat, true, false)?;
        let m = cx.tape.mul_scalar(m_raw, 1.0 / (h * w) as f64);
        let rho_e = cx.p(self.rho_e)?;
        let rho_d = cx.p(self.rho_d)?;
        let we3 = cx.tape.bmm(m, rho_e, false, false)?;
        let we = cx.tape.reshape(we3, &[n, c])?;
        let wd3 = cx.tape.bmm(m, rho_d, true, false)?;
        let wd = cx.tape.reshape(wd3, &[n, c])?;
        let xbar_e = cx.tape.channel_scale(xe, we)?;
        let xbar_d = cx.tape.channel_scale(up, wd)?;
        let cat = cx.tape.concat(&[xbar_e, xbar_d])?;
        self.merge.forward(cx, cat)
    }
}
