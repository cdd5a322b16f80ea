//! Differentiable context pooling (DCP).
//!
//! Classic r×r pooling picks one selection vector δ per window and returns
//! `Σ (window ⊙ δ)` — averaging (δ uniform) and max pooling (δ an argmax
//! indicator) are the two special cases. DCP generalizes this twice:
//!
//! 1. The selection vectors are *learned*: a 2×2, stride-2 convolution on
//!    the input produces one r² vector per window. The convolution is
//!    depthwise — every channel owns its own kernel matrix Δ̄ — matching
//!    the per-channel formulation. No normalization is applied to Δ̄; the
//!    smoothing factor below carries the scale.
//! 2. Windows exchange context: with windows flattened row-major into
//!    indices 1..m, a binary band matrix H (`H[p][q] = 1` iff `|p−q| ≤ τ`)
//!    couples every window to its band neighbors,
//!
//!        Ū = (m / ΣH) · (H ⊙ (Z̄ × Δ̄ᵀ)) × 1,
//!
//!    so pooled entry p aggregates the projections of all windows within
//!    band distance τ. τ = 0 (H = I) recovers per-window pooling exactly.
//!
//! [`context_pool`] evaluates the dense formula above verbatim and serves
//! as the reference for the banded O(m·τ) kernel used on the tape
//! ([`crate::ops::dcp_pool_forward`]); the two are compared in tests.
//!
//! Note on the band's geometry: row-major window flattening means a
//! bandwidth-1 band couples only horizontally adjacent windows — reaching
//! all eight spatial neighbors of a window would need τ ≥ w/r + 1. The
//! band definition is implemented verbatim; τ is configurable.

use rand_chacha::ChaCha8Rng;

use crate::layers::{Cx, ParamKind, ParamStore, PIdx};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Flatten an `h×w` plane into per-window rows: output `[m, r²]` where
/// `m = (h/r)(w/r)`, windows ordered row-major, entries within a window
/// ordered row-major.
pub fn flatten_windows(z: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w) = z.dims2("flatten_windows")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "flatten_windows",
            format!("window size {r} must divide extents {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(&[oh * ow, r * r]);
    let od = out.data_mut();
    for wy in 0..oh {
        for wx in 0..ow {
            let p = wy * ow + wx;
            for dy in 0..r {
                for dx in 0..r {
                    od[p * r * r + dy * r + dx] = z.data()[(wy * r + dy) * w + wx * r + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Classic pooling of one plane with an explicit per-window selection
/// vector: `kernel` is `[h/r, w/r, r²]` and output entry p is
/// `⟨window_p, kernel_p⟩`.
pub fn classic_pool(z: &Tensor, kernel: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w) = z.dims2("classic_pool")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "classic_pool",
            format!("window size {r} must divide extents {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    if kernel.shape() != [oh, ow, r * r] {
        return Err(Error::shape(
            "classic_pool",
            format!("kernel shape {:?}, expected [{oh}, {ow}, {}]", kernel.shape(), r * r),
        ));
    }
    let flat = flatten_windows(z, r)?;
    let mut out = Tensor::zeros(&[oh, ow]);
    let od = out.data_mut();
    for p in 0..oh * ow {
        od[p] = (0..r * r)
            .map(|s| flat.data()[p * r * r + s] * kernel.data()[p * r * r + s])
            .sum();
    }
    Ok(out)
}

/// The band indicator matrix: `[m, m]` with ones where `|p − q| ≤ τ`.
pub fn indicator_matrix(m: usize, tau: usize) -> Tensor {
    let mut h = Tensor::zeros(&[m, m]);
    let hd = h.data_mut();
    for p in 0..m {
        for q in 0..m {
            if p.abs_diff(q) <= tau {
                hd[p * m + q] = 1.0;
            }
        }
    }
    h
}

/// Dense evaluation of the banded pooling formula for one channel:
/// `Ū = (m/ΣH) · (H ⊙ (Z̄ × Δ̄ᵀ)) × 1`, returning the m-vector Ū.
///
/// This is the reference implementation; the tape uses a banded kernel
/// that never materializes the m×m product.
pub fn context_pool(z_flat: &Tensor, delta_flat: &Tensor, h: &Tensor) -> Result<Tensor> {
    let (m, r2) = z_flat.dims2("context_pool")?;
    if delta_flat.shape() != [m, r2] {
        return Err(Error::shape(
            "context_pool",
            format!("kernel matrix {:?} vs windows {:?}", delta_flat.shape(), z_flat.shape()),
        ));
    }
    if h.shape() != [m, m] {
        return Err(Error::shape(
            "context_pool",
            format!("indicator {:?}, expected [{m}, {m}]", h.shape()),
        ));
    }
    let sum_h: f64 = h.data().iter().sum();
    if sum_h == 0.0 {
        return Err(Error::shape("context_pool", "indicator matrix has no ones"));
    }
    let scale = m as f64 / sum_h;
    let mut out = Tensor::zeros(&[m]);
    let od = out.data_mut();
    for p in 0..m {
        let mut acc = 0.0;
        for q in 0..m {
            if h.data()[p * m + q] != 0.0 {
                let dot: f64 = (0..r2)
                    .map(|s| z_flat.data()[p * r2 + s] * delta_flat.data()[q * r2 + s])
                    .sum();
                acc += h.data()[p * m + q] * dot;
            }
        }
        od[p] = scale * acc;
    }
    Ok(out)
}

/// The DCP layer: a per-channel 2×2 stride-2 kernel projection plus
/// banded context aggregation. Halves both spatial extents.
pub struct DcpPooling {
    /// Projection weights `[2, 2, c, 4]` — channel k, filter ν.
    pub w: PIdx,
    /// Projection biases `[4c]`.
    pub b: PIdx,
    pub tau: usize,
    pub channels: usize,
}

impl DcpPooling {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        tau: usize,
    ) -> Self {
        // Each filter sees a 2×2 patch of a single channel: fan-in 4.
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            crate::layers::he_normal(rng, &[2, 2, channels, 4], 4),
        );
        let b = store.add(format!("{name}.b"), ParamKind::Weight, Tensor::zeros(&[4 * channels]));
        DcpPooling { w, b, tau, channels }
    }

    pub fn forward(&self, cx: &mut Cx, z: Var) -> Result<Var> {
        let w = cx.p(self.w)?;
        let b = cx.p(self.b)?;
        cx.tape.dcp_pool(z, w, b, self.tau)
    }

    /// Freeze the projection so every selection vector is the constant
    /// 1/4 — with τ = 0 the layer then *is* average pooling.
    pub fn freeze_to_average(&self, store: &mut ParamStore) {
        *store.value_mut(self.w) = Tensor::zeros(&[2, 2, self.channels, 4]);
        *store.value_mut(self.b) = Tensor::filled(&[4 * self.channels], 0.25);
    }
}
