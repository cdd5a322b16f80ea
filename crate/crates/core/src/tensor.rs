//! Dense row-major `f64` tensors.
//!
//! The layout convention for image-like data is NHWC: `[batch, height,
//! width, channels]`, so the channel axis is contiguous. Matrices are
//! `[rows, cols]`, batched matrices `[batch, rows, cols]`, and scalars live
//! in a rank-1 tensor of length 1.

use crate::{Error, Result};

/// Dense tensor: a shape vector plus row-major contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    /// Rank-1 scalar wrapper.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Build from parts. Panics if `data.len()` does not match the shape —
    /// that is a programming error, not a runtime condition.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "Tensor::from_vec: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.data.len(), shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as NHWC and return `(n, h, w, c)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::shape(op, format!("expected rank-4 NHWC tensor, got {:?}", self.shape))),
        }
    }

    /// Interpret as a matrix and return `(rows, cols)`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    /// Interpret as a batched matrix and return `(batch, rows, cols)`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, r, c] => Ok((b, r, c)),
            _ => Err(Error::shape(op, format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    /// Element accessor for NHWC tensors (tests and small demos; hot kernels
    /// index raw slices directly).
    pub fn at4(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        let (_, h, w, ch) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        debug_assert!(y < h && x < w && c < ch);
        self.data[((n * h + y) * w + x) * ch + c]
    }
}

/// Row-major offset of `[i, j]` in an `r×c` matrix.
#[inline(always)]
pub fn mat_idx(cols: usize, i: usize, j: usize) -> usize {
    i * cols + j
}

/// Row-major offset of `[n, y, x, c]` in an NHWC tensor.
#[inline(always)]
pub fn nhwc_idx(h: usize, w: usize, c: usize, n: usize, y: usize, x: usize, ch: usize) -> usize {
    debug_assert!(y < h && x < w && ch < c);
    ((n * h + y) * w + x) * c + ch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_accessors() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dims2("test").unwrap(), (2, 3));
        assert_eq!(t.data()[mat_idx(3, 1, 2)], 6.0);
    }

    #[test]
    fn reshape_preserves_data_and_rejects_bad_count() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.clone().reshaped(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }

    #[test]
    fn nhwc_indexing_is_channel_contiguous() {
        // 1×2×2×3: walking the channel axis moves by 1 in storage.
        let t = Tensor::from_vec(&[1, 2, 2, 3], (0..12).map(|v| v as f64).collect());
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 0, 2), 2.0);
        assert_eq!(t.at4(0, 0, 1, 0), 3.0);
        assert_eq!(t.at4(0, 1, 0, 0), 6.0);
        assert_eq!(t.at4(0, 1, 1, 2), 11.0);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(2.5).item(), 2.5);
    }

    #[test]
    fn finiteness_check() {
        assert!(Tensor::filled(&[3], 1.0).is_finite());
        assert!(!Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_finite());
        assert!(!Tensor::from_vec(&[2], vec![f64::INFINITY, 0.0]).is_finite());
    }
}
