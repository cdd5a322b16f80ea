//! `f64` matrix multiplication for the convolution and attention kernels.
//!
//! `gemm` computes `C = A·B` (or `C += A·B`) for row-major operands with
//! explicit leading dimensions. Two implementations sit behind a runtime
//! dispatch:
//!
//! - an AVX-512 microkernel (6×16 / 6×8 register tiles, FMA) used when the
//!   CPU supports `avx512f` — roughly 3× the portable path on wide tiles;
//! - a portable register-tiled path that autovectorizes on any target.
//!
//! Within one build on one machine the selected path is fixed, so results
//! are bitwise reproducible run to run. Across machines the FMA tile may
//! differ from the portable path in the last ulp; all numerical contracts
//! in this crate carry tolerances well above that.
//!
//! Accumulation order over the inner dimension is ascending in every path,
//! one independent accumulator per output element.

/// `C[m×n] = A[m×k] · B[k×n]` (row-major, leading dimensions `lda`, `ldb`,
/// `ldc`), or `C += A·B` when `accumulate` is set.
///
/// Requirements: `lda ≥ k`, `ldb ≥ n`, `ldc ≥ n`, and the slices must cover
/// the addressed elements. Zero-sized problems are no-ops (except that
/// `accumulate = false` still clears the addressed block of `C`).
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    debug_assert!(lda >= k && ldb >= n && ldc >= n, "gemm: leading dimensions too small");
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * lda + k.max(1));
    debug_assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    debug_assert!(c.len() >= (m - 1) * ldc + n);

    if !accumulate {
        for i in 0..m {
            c[i * ldc..i * ldc + n].fill(0.0);
        }
    }
    if k == 0 {
        return;
    }

    #[cfg(target_arch = "x86_64")]
    if have_avx512() && n >= 8 {
        // SAFETY: feature presence checked above; bounds asserted above.
        unsafe { avx512::gemm_acc(m, n, k, a, lda, b, ldb, c, ldc) };
        return;
    }

    portable::gemm_acc(m, n, k, a, lda, b, ldb, c, ldc);
}

/// Textbook triple loop. Reference for tests and the tail blocks of the
/// tiled paths.
pub fn gemm_naive(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        if !accumulate {
            c[i * ldc..i * ldc + n].fill(0.0);
        }
        for p in 0..k {
            let av = a[i * lda + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * ldb..p * ldb + n];
            let cr = &mut c[i * ldc..i * ldc + n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn have_avx512() -> bool {
    use std::sync::OnceLock;
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::arch::is_x86_feature_detected!("avx512f"))
}

/// Scalar accumulation for tile remainders: `C[i0..m, j0..n] += A·B`.
fn edge_acc(
    i0: usize,
    m: usize,
    j0: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    for i in i0..m {
        for p in 0..k {
            let av = a[i * lda + p];
            if av == 0.0 {
                continue;
            }
            for j in j0..n {
                c[i * ldc + j] += av * b[p * ldb + j];
            }
        }
    }
}

mod portable {
    use super::edge_acc;

    /// 6×8 register tile; the accumulator array stays in vector registers
    /// under autovectorization.
    #[inline]
    fn kern_6x8(
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        let mut acc = [[0f64; 8]; 6];
        for p in 0..k {
            let br: &[f64] = &b[p * ldb..p * ldb + 8];
            for (row, accr) in acc.iter_mut().enumerate() {
                let av = a[row * lda + p];
                for j in 0..8 {
                    accr[j] += av * br[j];
                }
            }
        }
        for (row, accr) in acc.iter().enumerate() {
            let cr = &mut c[row * ldc..row * ldc + 8];
            for j in 0..8 {
                cr[j] += accr[j];
            }
        }
    }

    pub fn gemm_acc(
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        let mut i = 0;
        while i + 6 <= m {
            let mut j = 0;
            while j + 8 <= n {
                kern_6x8(k, &a[i * lda..], lda, &b[j..], ldb, &mut c[i * ldc + j..], ldc);
                j += 8;
            }
            if j < n {
                edge_acc(i, i + 6, j, n, k, a, lda, b, ldb, c, ldc);
            }
            i += 6;
        }
        if i < m {
            edge_acc(i, m, 0, n, k, a, lda, b, ldb, c, ldc);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::edge_acc;
    use core::arch::x86_64::*;

    /// C[6×16] += A[6×k] · B[k×16]; 12 zmm accumulators.
    #[target_feature(enable = "avx512f")]
    unsafe fn kern_6x16(
        k: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
    ) {
        let mut acc = [[_mm512_setzero_pd(); 2]; 6];
        for p in 0..k {
            let b0 = _mm512_loadu_pd(b.add(p * ldb));
            let b1 = _mm512_loadu_pd(b.add(p * ldb + 8));
            for (row, accr) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*a.add(row * lda + p));
                accr[0] = _mm512_fmadd_pd(av, b0, accr[0]);
                accr[1] = _mm512_fmadd_pd(av, b1, accr[1]);
            }
        }
        for (row, accr) in acc.iter().enumerate() {
            let cp = c.add(row * ldc);
            _mm512_storeu_pd(cp, _mm512_add_pd(_mm512_loadu_pd(cp), accr[0]));
            _mm512_storeu_pd(cp.add(8), _mm512_add_pd(_mm512_loadu_pd(cp.add(8)), accr[1]));
        }
    }

    /// C[6×8] += A[6×k] · B[k×8]; 6 zmm accumulators.
    #[target_feature(enable = "avx512f")]
    unsafe fn kern_6x8(
        k: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
    ) {
        let mut acc = [_mm512_setzero_pd(); 6];
        for p in 0..k {
            let b0 = _mm512_loadu_pd(b.add(p * ldb));
            for (row, accr) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*a.add(row * lda + p));
                *accr = _mm512_fmadd_pd(av, b0, *accr);
            }
        }
        for (row, accr) in acc.iter().enumerate() {
            let cp = c.add(row * ldc);
            _mm512_storeu_pd(cp, _mm512_add_pd(_mm512_loadu_pd(cp), *accr));
        }
    }

    /// Tiled driver: 6-row strips, 16-wide then 8-wide column tiles, scalar
    /// remainders.
    ///
    /// # Safety
    /// Requires `avx512f` and operand slices covering the addressed region
    /// (checked by the caller).
    #[target_feature(enable = "avx512f")]
    pub unsafe fn gemm_acc(
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut i = 0;
        while i + 6 <= m {
            let mut j = 0;
            while j + 16 <= n {
                kern_6x16(k, ap.add(i * lda), lda, bp.add(j), ldb, cp.add(i * ldc + j), ldc);
                j += 16;
            }
            while j + 8 <= n {
                kern_6x8(k, ap.add(i * lda), lda, bp.add(j), ldb, cp.add(i * ldc + j), ldc);
                j += 8;
            }
            if j < n {
                edge_acc(i, i + 6, j, n, k, a, lda, b, ldb, c, ldc);
            }
            i += 6;
        }
        if i < m {
            edge_acc(i, m, 0, n, k, a, lda, b, ldb, c, ldc);
        }
    }
}
