//! Spatial and normalization kernels: im2col convolution on top of
//! [`crate::linalg::gemm`], max pooling, nearest-neighbor upsampling,
//! global average pooling, batch-normalization statistics, row softmax,
//! channel-maximum reversal, and the banded context-pooling kernel with
//! its learnable 2×2 window projection.
//!
//! Everything in this module is a plain function over [`Tensor`] values —
//! the autodiff tape composes these kernels and owns gradient plumbing.
//! Forward kernels validate shapes and return structured errors; backward
//! kernels `debug_assert` instead, because they are only reachable through
//! a tape whose forward pass already validated the geometry.
//!
//! Layout conventions, used everywhere without exception:
//! - activations are NHWC (`[n, h, w, c]`, channels contiguous);
//! - convolution weights are `[kh, kw, c_in, c_out]` (output channels
//!   contiguous), biases `[c_out]`;
//! - im2col rows enumerate `(n, oy, ox)` in row-major order and columns
//!   enumerate `(ky, kx, c_in)`, so a flattened weight tensor is directly
//!   the right-hand GEMM operand.

use crate::linalg;
use crate::tensor::{nhwc_idx, Tensor};
use crate::{Error, Result};

/// Geometry of a 2-D convolution over NHWC tensors.
///
/// `cyclic` switches zero padding to wrap-around indexing; it exists so
/// translation-invariance properties can be asserted exactly in tests.
/// Production layers use zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub cyclic: bool,
}

impl ConvSpec {
    /// Stride-1 convolution padded so the output keeps the input extent.
    /// Requires an odd kernel so the padding is symmetric.
    pub fn same(k: usize, dilation: usize) -> Self {
        assert!(k % 2 == 1, "same-padding requires an odd kernel, got {k}");
        let pad = dilation * (k - 1) / 2;
        ConvSpec { kh: k, kw: k, stride: 1, dilation, pad_h: pad, pad_w: pad, cyclic: false }
    }

    /// Unpadded convolution with the given stride.
    pub fn valid(k: usize, stride: usize) -> Self {
        ConvSpec { kh: k, kw: k, stride, dilation: 1, pad_h: 0, pad_w: 0, cyclic: false }
    }

    /// Same geometry, wrap-around instead of zero padding.
    pub fn into_cyclic(mut self) -> Self {
        self.cyclic = true;
        self
    }

    /// Output extent for an `h×w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eh = self.dilation * (self.kh - 1) + 1;
        let ew = self.dilation * (self.kw - 1) + 1;
        if h + 2 * self.pad_h < eh || w + 2 * self.pad_w < ew {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {h}×{w} too small for kernel {}×{} dilation {} padding {}×{}",
                    self.kh, self.kw, self.dilation, self.pad_h, self.pad_w
                ),
            ));
        }
        Ok((
            (h + 2 * self.pad_h - eh) / self.stride + 1,
            (w + 2 * self.pad_w - ew) / self.stride + 1,
        ))
    }
}

/// Resolve a (possibly padded) input coordinate. Returns `None` for
/// out-of-range zero-padding positions.
#[inline]
fn resolve(coord: isize, extent: usize, cyclic: bool) -> Option<usize> {
    if (0..extent as isize).contains(&coord) {
        Some(coord as usize)
    } else if cyclic {
        Some(coord.rem_euclid(extent as usize as isize) as usize)
    } else {
        None
    }
}

/// Patch matrix for GEMM-backed convolution. Returns `(col, rows, cols)`
/// with `col[row * cols + (ky·kw + kx)·c_in + c]`; padding slots stay zero.
pub fn im2col(x: &Tensor, spec: &ConvSpec, oh: usize, ow: usize) -> (Vec<f64>, usize, usize) {
    patch_matrix(x, spec, oh, ow, false)
}

/// Transposed patch matrix `[cols, rows]`, the left GEMM operand of the
/// weight-gradient product.
pub fn im2col_t(x: &Tensor, spec: &ConvSpec, oh: usize, ow: usize) -> (Vec<f64>, usize, usize) {
    patch_matrix(x, spec, oh, ow, true)
}

fn patch_matrix(
    x: &Tensor,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    transposed: bool,
) -> (Vec<f64>, usize, usize) {
    let (n, h, w, cin) = match x.shape() {
        [n, h, w, c] => (*n, *h, *w, *c),
        s => panic!("patch_matrix expects NHWC, got {s:?}"),
    };
    let rows = n * oh * ow;
    let cols = spec.kh * spec.kw * cin;
    let mut dst = vec![0.0; rows * cols];
    let xd = x.data();
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (nn * oh + oy) * ow + ox;
                for ky in 0..spec.kh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.pad_h as isize;
                    let Some(iy) = resolve(iy, h, spec.cyclic) else { continue };
                    for kx in 0..spec.kw {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.pad_w as isize;
                        let Some(ix) = resolve(ix, w, spec.cyclic) else { continue };
                        let src = nhwc_idx(h, w, cin, nn, iy, ix, 0);
                        let kbase = (ky * spec.kw + kx) * cin;
                        if transposed {
                            for c in 0..cin {
                                dst[(kbase + c) * rows + row] = xd[src + c];
                            }
                        } else {
                            dst[row * cols + kbase..row * cols + kbase + cin]
                                .copy_from_slice(&xd[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
    (dst, rows, cols)
}

/// Adjoint of [`im2col`]: scatter-add a patch-matrix gradient back onto the
/// input gradient (same traversal, `+=` instead of copy).
pub fn col2im_add(
    colgrad: &[f64],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut Tensor,
) {
    let (n, h, w, cin) = match dx.shape() {
        [n, h, w, c] => (*n, *h, *w, *c),
        s => panic!("col2im_add expects NHWC, got {s:?}"),
    };
    let cols = spec.kh * spec.kw * cin;
    let xd = dx.data_mut();
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (nn * oh + oy) * ow + ox;
                for ky in 0..spec.kh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.pad_h as isize;
                    let Some(iy) = resolve(iy, h, spec.cyclic) else { continue };
                    for kx in 0..spec.kw {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.pad_w as isize;
                        let Some(ix) = resolve(ix, w, spec.cyclic) else { continue };
                        let dst = nhwc_idx(h, w, cin, nn, iy, ix, 0);
                        let kbase = (ky * spec.kw + kx) * cin;
                        for c in 0..cin {
                            xd[dst + c] += colgrad[row * cols + kbase + c];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv2d(x, w) + b` with `w` of shape `[kh, kw, c_in, c_out]`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let (n, h, ww, cin) = x.dims4("conv2d")?;
    let (kh, kw, wcin, cout) = w.dims4("conv2d.weight")?;
    if kh != spec.kh || kw != spec.kw || wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?} incompatible with spec {}×{} over {} input channels",
                w.shape(),
                spec.kh,
                spec.kw,
                cin
            ),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    let (oh, ow) = spec.out_hw(h, ww)?;
    let (col, rows, cols) = im2col(x, spec, oh, ow);
    let mut y = Tensor::zeros(&[n, oh, ow, cout]);
    linalg::gemm(rows, cout, cols, &col, cols, w.data(), cout, y.data_mut(), cout, false);
    if let Some(b) = b {
        let bd = b.data();
        let yd = y.data_mut();
        for row in 0..rows {
            for (co, bv) in bd.iter().enumerate() {
                yd[row * cout + co] += bv;
            }
        }
    }
    Ok(y)
}

/// Input gradient of `conv2d`: `colgrad = gout · wᵀ`, scattered by the
/// im2col adjoint.
pub fn conv2d_backward_x(
    gout: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    x_shape: &[usize],
) -> Tensor {
    let [n, _h, _w, cin] = *x_shape else { panic!("conv2d_backward_x: bad shape") };
    let (gn, oh, ow, cout) = gout.dims4("conv2d.backward").expect("gout rank");
    debug_assert_eq!(gn, n);
    let cols = spec.kh * spec.kw * cin;
    let rows = n * oh * ow;
    // Transposed weight copy [c_out, cols] so GEMM can run row-major.
    let wd = w.data();
    let mut wt = vec![0.0; cout * cols];
    for kidx in 0..cols {
        for co in 0..cout {
            wt[co * cols + kidx] = wd[kidx * cout + co];
        }
    }
    let mut colgrad = vec![0.0; rows * cols];
    linalg::gemm(rows, cols, cout, gout.data(), cout, &wt, cols, &mut colgrad, cols, false);
    let mut dx = Tensor::zeros(x_shape);
    col2im_add(&colgrad, spec, oh, ow, &mut dx);
    dx
}

/// Weight gradient of `conv2d`: `dw = im2colᵀ(x) · gout`.
pub fn conv2d_backward_w(gout: &Tensor, x: &Tensor, spec: &ConvSpec) -> Tensor {
    let (_n, _oh, _ow, cout) = gout.dims4("conv2d.backward").expect("gout rank");
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let cin = x.shape()[3];
    let (colt, rows, cols) = im2col_t(x, spec, oh, ow);
    let mut dw = Tensor::zeros(&[spec.kh, spec.kw, cin, cout]);
    linalg::gemm(cols, cout, rows, &colt, rows, gout.data(), cout, dw.data_mut(), cout, false);
    dw
}

/// Bias gradient of `conv2d`: per-channel sums of the output gradient.
pub fn conv2d_backward_b(gout: &Tensor) -> Tensor {
    let cout = *gout.shape().last().expect("gout rank");
    let mut db = Tensor::zeros(&[cout]);
    let dbd = db.data_mut();
    for (i, g) in gout.data().iter().enumerate() {
        dbd[i % cout] += g;
    }
    db
}

/// `r×r` max pooling with stride `r`. Returns the pooled tensor plus the
/// flat input index of each window maximum (first-in-scan-order on ties),
/// which the backward pass scatters into.
pub fn max_pool_forward(x: &Tensor, r: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, h, w, c) = x.dims4("max_pool")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "max_pool",
            format!("extent {h}×{w} not divisible by window {r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut y = Tensor::zeros(&[n, oh, ow, c]);
    let mut arg = vec![0usize; n * oh * ow * c];
    let xd = x.data();
    let yd = y.data_mut();
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..r {
                        for dx in 0..r {
                            let idx = nhwc_idx(h, w, c, nn, oy * r + dy, ox * r + dx, ch);
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = nhwc_idx(oh, ow, c, nn, oy, ox, ch);
                    yd[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Scatter the pooled gradient back to each window's argmax position.
pub fn max_pool_backward(gout: &Tensor, argmax: &[usize], x_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (g, &idx) in gout.data().iter().zip(argmax) {
        dxd[idx] += g;
    }
    dx
}

/// Nearest-neighbor upsampling by an integer factor `r`.
pub fn upsample_forward(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4("upsample")?;
    let (oh, ow) = (h * r, w * r);
    let mut y = Tensor::zeros(&[n, oh, ow, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = nhwc_idx(h, w, c, nn, oy / r, ox / r, 0);
                let dst = nhwc_idx(oh, ow, c, nn, oy, ox, 0);
                yd[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Ok(y)
}

/// Adjoint of nearest-neighbor upsampling: sum each `r×r` replica block.
pub fn upsample_backward(gout: &Tensor, r: usize) -> Tensor {
    let (n, oh, ow, c) = gout.dims4("upsample.backward").expect("gout rank");
    let (h, w) = (oh / r, ow / r);
    let mut dx = Tensor::zeros(&[n, h, w, c]);
    let gd = gout.data();
    let dxd = dx.data_mut();
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = nhwc_idx(oh, ow, c, nn, oy, ox, 0);
                let dst = nhwc_idx(h, w, c, nn, oy / r, ox / r, 0);
                for ch in 0..c {
                    dxd[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    dx
}

/// Spatial mean per `(n, c)`: `[n, h, w, c] → [n, c]`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4("global_avg_pool")?;
    let mut y = Tensor::zeros(&[n, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for nn in 0..n {
        for p in 0..h * w {
            let base = (nn * h * w + p) * c;
            for ch in 0..c {
                yd[nn * c + ch] += xd[base + ch];
            }
        }
    }
    let scale = 1.0 / (h * w) as f64;
    for v in yd.iter_mut() {
        *v *= scale;
    }
    Ok(y)
}

/// Adjoint of the spatial mean: broadcast `g/(h·w)` over the plane.
pub fn global_avg_pool_backward(gout: &Tensor, x_shape: &[usize]) -> Tensor {
    let [n, h, w, c] = *x_shape else { panic!("global_avg_pool_backward: bad shape") };
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let gd = gout.data();
    let dxd = dx.data_mut();
    for nn in 0..n {
        for p in 0..h * w {
            let base = (nn * h * w + p) * c;
            for ch in 0..c {
                dxd[base + ch] = gd[nn * c + ch] * scale;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over the batch and spatial axes.
pub fn bn_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, h, w, c) = x.dims4("batch_norm")?;
    let m = (n * h * w) as f64;
    let mut mean = Tensor::zeros(&[c]);
    let mut var = Tensor::zeros(&[c]);
    let xd = x.data();
    let md = mean.data_mut();
    for (i, v) in xd.iter().enumerate() {
        md[i % c] += v;
    }
    for v in md.iter_mut() {
        *v /= m;
    }
    let vd = var.data_mut();
    for (i, v) in xd.iter().enumerate() {
        let d = v - md[i % c];
        vd[i % c] += d * d;
    }
    for v in vd.iter_mut() {
        *v /= m;
    }
    Ok((mean, var))
}

/// `y = γ·(x − μ)/√(v + ε) + β` with per-channel statistics.
pub fn bn_forward(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (_n, _h, _w, c) = x.dims4("batch_norm")?;
    for (t, name) in [(mean, "mean"), (var, "var"), (gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            ));
        }
    }
    let ivstd: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let (xd, md, gd, bd) = (x.data(), mean.data(), gamma.data(), beta.data());
    let yd = y.data_mut();
    for (i, v) in xd.iter().enumerate() {
        let ch = i % c;
        yd[i] = gd[ch] * (v - md[ch]) * ivstd[ch] + bd[ch];
    }
    Ok(y)
}

/// Gradients of [`bn_forward`]. With `stats_from_batch`, μ and v are
/// functions of `x` (training mode) and the full chain rule applies; in
/// eval mode they are constants.
pub fn bn_backward(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    eps: f64,
    gout: &Tensor,
    stats_from_batch: bool,
) -> (Tensor, Tensor, Tensor) {
    let [n, h, w, c] = *x.shape() else { panic!("bn_backward: bad shape") };
    let m = (n * h * w) as f64;
    let (xd, md, vd, gd) = (x.data(), mean.data(), var.data(), gamma.data());
    let god = gout.data();
    let ivstd: Vec<f64> = vd.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let (dgd, dbd) = (dgamma.data_mut(), dbeta.data_mut());
    // Per-channel reductions: Σg and Σ g·x̂.
    for (i, g) in god.iter().enumerate() {
        let ch = i % c;
        let xhat = (xd[i] - md[ch]) * ivstd[ch];
        dgd[ch] += g * xhat;
        dbd[ch] += g;
    }

    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    if stats_from_batch {
        for (i, g) in god.iter().enumerate() {
            let ch = i % c;
            let xhat = (xd[i] - md[ch]) * ivstd[ch];
            dxd[i] = gd[ch] * ivstd[ch] * (g - dbd[ch] / m - xhat * dgd[ch] / m);
        }
    } else {
        for (i, g) in god.iter().enumerate() {
            let ch = i % c;
            dxd[i] = gd[ch] * ivstd[ch] * g;
        }
    }
    (dx, dgamma, dbeta)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("softmax on rank-0 tensor");
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for row in 0..xd.len() / c {
        let xs = &xd[row * c..(row + 1) * c];
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in xs.iter().enumerate() {
            let e = (v - max).exp();
            yd[row * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            yd[row * c + j] /= sum;
        }
    }
    y
}

/// Per-channel maximum reversal: `out = max(x over the plane) − x`,
/// independently for every `(n, c)` pair. Returns the output and each
/// plane's flat spatial argmax (first-in-scan-order on ties); the gradient
/// of the plane maximum routes through that single pixel.
pub fn self_reversal_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, h, w, c) = x.dims4("self_reversal")?;
    if h * w == 0 || c == 0 || n == 0 {
        return Err(Error::shape("self_reversal", "empty tensor"));
    }
    let mut y = Tensor::zeros(x.shape());
    let mut arg = vec![0usize; n * c];
    let xd = x.data();
    let yd = y.data_mut();
    for nn in 0..n {
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for p in 0..h * w {
                let v = xd[(nn * h * w + p) * c + ch];
                if v > best {
                    best = v;
                    best_p = p;
                }
            }
            arg[nn * c + ch] = best_p;
            for p in 0..h * w {
                let i = (nn * h * w + p) * c + ch;
                yd[i] = best - xd[i];
            }
        }
    }
    Ok((y, arg))
}

/// Gradient of [`self_reversal_forward`]:
/// `dx_j = [j = argmax]·Σ_p g_p − g_j` per `(n, c)` plane.
pub fn self_reversal_backward(gout: &Tensor, argmax: &[usize]) -> Tensor {
    let [n, h, w, c] = *gout.shape() else { panic!("self_reversal_backward: bad shape") };
    let mut dx = Tensor::zeros(gout.shape());
    let gd = gout.data();
    let dxd = dx.data_mut();
    for nn in 0..n {
        for ch in 0..c {
            let mut sum = 0.0;
            for p in 0..h * w {
                let i = (nn * h * w + p) * c + ch;
                sum += gd[i];
                dxd[i] = -gd[i];
            }
            dxd[(nn * h * w + argmax[nn * c + ch]) * c + ch] += sum;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Context pooling: learnable 2×2 window projection + banded aggregation.
// ---------------------------------------------------------------------------

/// Window-projection convolution for context pooling: an r=2, stride-2
/// layer that maps each input channel `k` to four coefficients, one per
/// window slot. Weight layout `[2, 2, c, 4]`, bias `[4c]`; output channel
/// `k·4 + ν` where `ν = dy·2 + dx` indexes the window slot.
pub fn delta_conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, ww, c) = x.dims4("context_pool.delta")?;
    if h % 2 != 0 || ww % 2 != 0 {
        return Err(Error::shape(
            "context_pool.delta",
            format!("extent {h}×{ww} not divisible by the 2×2 window"),
        ));
    }
    if w.shape() != [2, 2, c, 4] || b.shape() != [4 * c] {
        return Err(Error::shape(
            "context_pool.delta",
            format!(
                "kernel {:?} / bias {:?} incompatible with {c} input channels",
                w.shape(),
                b.shape()
            ),
        ));
    }
    let (oh, ow) = (h / 2, ww / 2);
    let mut y = Tensor::zeros(&[n, oh, ow, 4 * c]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let yd = y.data_mut();
    for nn in 0..n {
        for wy in 0..oh {
            for wx in 0..ow {
                let o = nhwc_idx(oh, ow, 4 * c, nn, wy, wx, 0);
                for k in 0..c {
                    for nu in 0..4 {
                        let mut acc = bd[k * 4 + nu];
                        for (slot, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            acc += wd[(slot * c + k) * 4 + nu]
                                * xd[nhwc_idx(h, ww, c, nn, 2 * wy + dy, 2 * wx + dx, k)];
                        }
                        yd[o + k * 4 + nu] = acc;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`delta_conv_forward`] with respect to input, kernel, bias.
pub fn delta_conv_backward(
    gout: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, h, ww, c] = *x.shape() else { panic!("delta_conv_backward: bad shape") };
    let (oh, ow) = (h / 2, ww / 2);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(&[2, 2, c, 4]);
    let mut db = Tensor::zeros(&[4 * c]);
    let (gd, xd, wd) = (gout.data(), x.data(), w.data());
    let (dxd, dwd, dbd) = (dx.data_mut(), dw.data_mut(), db.data_mut());
    for nn in 0..n {
        for wy in 0..oh {
            for wx in 0..ow {
                let o = nhwc_idx(oh, ow, 4 * c, nn, wy, wx, 0);
                for k in 0..c {
                    for nu in 0..4 {
                        let g = gd[o + k * 4 + nu];
                        dbd[k * 4 + nu] += g;
                        for (slot, (dy, dx_)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let xi = nhwc_idx(h, ww, c, nn, 2 * wy + dy, 2 * wx + dx_, k);
                            dwd[(slot * c + k) * 4 + nu] += g * xd[xi];
                            dxd[xi] += g * wd[(slot * c + k) * 4 + nu];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Number of ones in the `m×m` band indicator of half-width `τ`:
/// `m·(2τ+1) − τ·(τ+1)` after clamping `τ` to `m−1` (an over-wide band is
/// simply a full matrix, not an error).
pub fn band_ones(m: usize, tau: usize) -> f64 {
    let t = tau.min(m.saturating_sub(1));
    (m * (2 * t + 1) - t * (t + 1)) as f64
}

/// Banded context pooling of `z` under per-window kernels `delta`.
///
/// Per `(n, k)`: window `p`'s output is `s · Σ_{|q−p| ≤ τ} ⟨z̄_p, δ̄_q⟩`
/// over the row-major linearized window index, where `z̄_p` is window `p`'s
/// four pixels, `δ̄_q` is window `q`'s projected kernel, and
/// `s = m / ΣH` normalizes by the band population so the identity band
/// (`τ = 0`) has unit scale.
pub fn dcp_pool_forward(z: &Tensor, delta: &Tensor, tau: usize) -> Result<Tensor> {
    let (n, h, w, c) = z.dims4("context_pool")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "context_pool",
            format!("extent {h}×{w} not divisible by the 2×2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    if delta.shape() != [n, oh, ow, 4 * c] {
        return Err(Error::shape(
            "context_pool",
            format!("delta {:?} does not match {n}×{oh}×{ow}×{}", delta.shape(), 4 * c),
        ));
    }
    let m = oh * ow;
    let scale = m as f64 / band_ones(m, tau);
    let mut u = Tensor::zeros(&[n, oh, ow, c]);
    let (zd, dd) = (z.data(), delta.data());
    let ud = u.data_mut();
    let mut zbar = vec![0.0; m * 4];
    let mut dbar = vec![0.0; m * 4];
    for nn in 0..n {
        for k in 0..c {
            gather_windows(zd, n, h, w, c, nn, k, &mut zbar);
            gather_delta(dd, n, oh, ow, c, nn, k, &mut dbar);
            for p in 0..m {
                let lo = p.saturating_sub(tau);
                let hi = (p + tau).min(m - 1);
                let zp = &zbar[p * 4..p * 4 + 4];
                let mut acc = 0.0;
                for q in lo..=hi {
                    let dq = &dbar[q * 4..q * 4 + 4];
                    acc += zp[0] * dq[0] + zp[1] * dq[1] + zp[2] * dq[2] + zp[3] * dq[3];
                }
                ud[(nn * m + p) * c + k] = scale * acc;
            }
        }
    }
    Ok(u)
}

/// Gradients of [`dcp_pool_forward`] with respect to `z` and `delta`.
/// The band is symmetric, so both directions reduce to band sums:
/// `dz̄_p = s·g_p·Σ_{q∈band(p)} δ̄_q` and `dδ̄_q = s·Σ_{p∈band(q)} g_p·z̄_p`.
pub fn dcp_pool_backward(
    z: &Tensor,
    delta: &Tensor,
    tau: usize,
    gout: &Tensor,
) -> (Tensor, Tensor) {
    let [n, h, w, c] = *z.shape() else { panic!("dcp_pool_backward: bad shape") };
    let (oh, ow) = (h / 2, w / 2);
    let m = oh * ow;
    let scale = m as f64 / band_ones(m, tau);
    let mut dz = Tensor::zeros(z.shape());
    let mut ddelta = Tensor::zeros(delta.shape());
    let (zd, dd, gd) = (z.data(), delta.data(), gout.data());
    let mut zbar = vec![0.0; m * 4];
    let mut dbar = vec![0.0; m * 4];
    let mut dzbar = vec![0.0; m * 4];
    let mut ddbar = vec![0.0; m * 4];
    for nn in 0..n {
        for k in 0..c {
            gather_windows(zd, n, h, w, c, nn, k, &mut zbar);
            gather_delta(dd, n, oh, ow, c, nn, k, &mut dbar);
            dzbar.fill(0.0);
            ddbar.fill(0.0);
            for p in 0..m {
                let g = scale * gd[(nn * m + p) * c + k];
                let lo = p.saturating_sub(tau);
                let hi = (p + tau).min(m - 1);
                let zp = &zbar[p * 4..p * 4 + 4];
                for q in lo..=hi {
                    for nu in 0..4 {
                        dzbar[p * 4 + nu] += g * dbar[q * 4 + nu];
                        ddbar[q * 4 + nu] += g * zp[nu];
                    }
                }
            }
            scatter_windows_add(&dzbar, n, h, w, c, nn, k, dz.data_mut());
            scatter_delta_add(&ddbar, n, oh, ow, c, nn, k, ddelta.data_mut());
        }
    }
    (dz, ddelta)
}

/// Copy channel `k`'s 2×2 windows of an NHWC plane into a `[m, 4]` scratch
/// (window-major, slot `ν = dy·2 + dx`).
fn gather_windows(
    xd: &[f64],
    _n: usize,
    h: usize,
    w: usize,
    c: usize,
    nn: usize,
    k: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for wy in 0..oh {
        for wx in 0..ow {
            let p = wy * ow + wx;
            for (nu, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                out[p * 4 + nu] = xd[nhwc_idx(h, w, c, nn, 2 * wy + dy, 2 * wx + dx, k)];
            }
        }
    }
}

fn scatter_windows_add(
    src: &[f64],
    _n: usize,
    h: usize,
    w: usize,
    c: usize,
    nn: usize,
    k: usize,
    xd: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for wy in 0..oh {
        for wx in 0..ow {
            let p = wy * ow + wx;
            for (nu, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                xd[nhwc_idx(h, w, c, nn, 2 * wy + dy, 2 * wx + dx, k)] += src[p * 4 + nu];
            }
        }
    }
}

/// Copy channel `k`'s four kernel coefficients per window (channels
/// `k·4 + ν` of the projection output) into a `[m, 4]` scratch.
fn gather_delta(
    dd: &[f64],
    _n: usize,
    oh: usize,
    ow: usize,
    c: usize,
    nn: usize,
    k: usize,
    out: &mut [f64],
) {
    let m = oh * ow;
    for p in 0..m {
        let base = (nn * m + p) * 4 * c + k * 4;
        out[p * 4..p * 4 + 4].copy_from_slice(&dd[base..base + 4]);
    }
}

fn scatter_delta_add(
    src: &[f64],
    _n: usize,
    oh: usize,
    ow: usize,
    c: usize,
    nn: usize,
    k: usize,
    dd: &mut [f64],
) {
    let m = oh * ow;
    for p in 0..m {
        let base = (nn * m + p) * 4 * c + k * 4;
        for nu in 0..4 {
            dd[base + nu] += src[p * 4 + nu];
        }
    }
}
