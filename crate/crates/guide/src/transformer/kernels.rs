//! Scalar trait and dense row-major matrix kernels for the model hot paths.
//!
//! The model code is generic over [`Real`] so the same forward/backward pass
//! runs in f32 (training, fast) and f64 (gradient checking, precise). The f32
//! implementation swaps in AVX2+FMA kernel bodies at runtime when the CPU
//! supports them. Every output element is produced by exactly one sequential
//! accumulation chain, so results are reproducible for a fixed build on a
//! fixed machine regardless of how many times a run is repeated.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite_v(self) -> bool;

    /// out (m x n) = a (m x k) * b (k x n); adds into `out` when `acc`.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], out: &mut [Self], acc: bool) {
        gemm_nn_generic(m, k, n, a, b, out, acc);
    }

    /// out (m x n) = a (m x kd) * b^T, with b stored (n x kd); adds when `acc`.
    fn gemm_nt(m: usize, kd: usize, n: usize, a: &[Self], b: &[Self], out: &mut [Self], acc: bool) {
        gemm_nt_generic(m, kd, n, a, b, out, acc);
    }
}

impl Real for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(x: f64) -> f64 {
        x
    }
    fn from_f32(x: f32) -> f64 {
        x as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn maxv(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
}

impl Real for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn from_f32(x: f32) -> f32 {
        x
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn tanh(self) -> f32 {
        f32::tanh(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn maxv(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }

    fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2_fma() {
            // Safety: feature presence checked at runtime.
            unsafe { avx::gemm_nn(m, k, n, a, b, out, acc) };
            return;
        }
        gemm_nn_generic(m, k, n, a, b, out, acc);
    }

    fn gemm_nt(m: usize, kd: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2_fma() {
            // One contiguous transpose turns the dot-product form into the
            // tiled kernel's layout; the copy is O(kd*n) against O(m*kd*n)
            // of arithmetic.
            debug_assert_eq!(b.len(), n * kd);
            let mut bt = vec![0.0f32; kd * n];
            for r in 0..n {
                for c in 0..kd {
                    bt[c * n + r] = b[r * kd + c];
                }
            }
            unsafe { avx::gemm_nn(m, kd, n, a, &bt, out, acc) };
            return;
        }
        gemm_nt_generic(m, kd, n, a, b, out, acc);
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static DETECTED: OnceLock<bool> = OnceLock::new();
    *DETECTED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

pub fn gemm_nn_generic<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    out: &mut [F],
    acc: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        if !acc {
            for o in orow.iter_mut() {
                *o = F::ZERO;
            }
        }
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn gemm_nt_generic<F: Real>(
    m: usize,
    kd: usize,
    n: usize,
    a: &[F],
    b: &[F],
    out: &mut [F],
    acc: bool,
) {
    debug_assert_eq!(a.len(), m * kd);
    debug_assert_eq!(b.len(), n * kd);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * kd..(i + 1) * kd];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * kd..(j + 1) * kd];
            let mut s = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            if acc {
                *o += s;
            } else {
                *o = s;
            }
        }
    }
}

/// out (m x n) = a^T * b with a stored (kr x m), b stored (kr x n).
/// Implemented as an explicit transpose plus `gemm_nn` so the fast kernel
/// carries the flops.
pub fn gemm_tn<F: Real>(kr: usize, m: usize, n: usize, a: &[F], b: &[F], out: &mut [F], acc: bool) {
    debug_assert_eq!(a.len(), kr * m);
    debug_assert_eq!(b.len(), kr * n);
    debug_assert_eq!(out.len(), m * n);
    let mut at = vec![F::ZERO; m * kr];
    for r in 0..kr {
        for c in 0..m {
            at[c * kr + r] = a[r * m + c];
        }
    }
    F::gemm_nn(m, kr, n, &at, b, out, acc);
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    /// Rows handled per register tile. Six rows of two vectors each leave
    /// room for the two B loads and one broadcast in the 16-register file.
    const MR: usize = 6;

    /// Row-major GEMM tiled 6 rows by 16 columns: twelve accumulators stay
    /// resident while each k step costs two B loads and six A broadcasts.
    /// Leftover columns drain through 8-wide and scalar loops, leftover rows
    /// through a single-row kernel.
    #[allow(clippy::needless_range_loop)]
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32], acc: bool) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let op = out.as_mut_ptr();
        let mut i = 0usize;
        while i + MR <= m {
            let mut j = 0usize;
            while j + 16 <= n {
                let mut c0 = [_mm256_setzero_ps(); MR];
                let mut c1 = [_mm256_setzero_ps(); MR];
                if acc {
                    for r in 0..MR {
                        let o = op.add((i + r) * n + j);
                        c0[r] = _mm256_loadu_ps(o);
                        c1[r] = _mm256_loadu_ps(o.add(8));
                    }
                }
                for kk in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(kk * n + j));
                    let b1 = _mm256_loadu_ps(bp.add(kk * n + j + 8));
                    for r in 0..MR {
                        let av = _mm256_set1_ps(*ap.add((i + r) * k + kk));
                        c0[r] = _mm256_fmadd_ps(av, b0, c0[r]);
                        c1[r] = _mm256_fmadd_ps(av, b1, c1[r]);
                    }
                }
                for r in 0..MR {
                    let o = op.add((i + r) * n + j);
                    _mm256_storeu_ps(o, c0[r]);
                    _mm256_storeu_ps(o.add(8), c1[r]);
                }
                j += 16;
            }
            while j + 8 <= n {
                let mut c = [_mm256_setzero_ps(); MR];
                if acc {
                    for r in 0..MR {
                        c[r] = _mm256_loadu_ps(op.add((i + r) * n + j));
                    }
                }
                for kk in 0..k {
                    let bv = _mm256_loadu_ps(bp.add(kk * n + j));
                    for r in 0..MR {
                        let av = _mm256_set1_ps(*ap.add((i + r) * k + kk));
                        c[r] = _mm256_fmadd_ps(av, bv, c[r]);
                    }
                }
                for r in 0..MR {
                    _mm256_storeu_ps(op.add((i + r) * n + j), c[r]);
                }
                j += 8;
            }
            while j < n {
                for r in 0..MR {
                    let row = i + r;
                    let mut s = if acc { *op.add(row * n + j) } else { 0.0 };
                    for kk in 0..k {
                        s += *ap.add(row * k + kk) * *bp.add(kk * n + j);
                    }
                    *op.add(row * n + j) = s;
                }
                j += 1;
            }
            i += MR;
        }
        while i < m {
            let arow = ap.add(i * k);
            let orow = op.add(i * n);
            let mut j = 0usize;
            while j + 8 <= n {
                let o = orow.add(j);
                let mut c = if acc { _mm256_loadu_ps(o) } else { _mm256_setzero_ps() };
                for kk in 0..k {
                    let av = _mm256_set1_ps(*arow.add(kk));
                    c = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(kk * n + j)), c);
                }
                _mm256_storeu_ps(o, c);
                j += 8;
            }
            while j < n {
                let mut s = if acc { *orow.add(j) } else { 0.0 };
                for kk in 0..k {
                    s += *arow.add(kk) * *bp.add(kk * n + j);
                }
                *orow.add(j) = s;
                j += 1;
            }
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {}: {} vs {}", i, x, y);
        }
    }

    // Shapes chosen to hit full 6-row blocks, leftover rows, the 16-wide
    // tile, the 8-wide loop, and scalar column tails.
    const SHAPES: &[(usize, usize, usize)] = &[
        (1, 1, 1),
        (3, 5, 7),
        (4, 16, 64),
        (5, 33, 67),
        (2, 8, 130),
        (7, 3, 72),
        (13, 40, 33),
        (12, 19, 48),
    ];

    #[test]
    fn dispatched_nn_matches_generic() {
        for (t, &(m, k, n)) in SHAPES.iter().enumerate() {
            let a = rand_vec(m * k, 100 + t as u64);
            let b = rand_vec(k * n, 200 + t as u64);
            let mut fast = vec![0.5; m * n];
            let mut slow = vec![0.5; m * n];
            for acc in [false, true] {
                f32::gemm_nn(m, k, n, &a, &b, &mut fast, acc);
                gemm_nn_generic(m, k, n, &a, &b, &mut slow, acc);
                close(&fast, &slow, 1e-4);
            }
        }
    }

    #[test]
    fn dispatched_nt_matches_generic() {
        for (t, &(m, kd, n)) in SHAPES.iter().enumerate() {
            let a = rand_vec(m * kd, 300 + t as u64);
            let b = rand_vec(n * kd, 400 + t as u64);
            let mut fast = vec![0.25; m * n];
            let mut slow = vec![0.25; m * n];
            for acc in [false, true] {
                f32::gemm_nt(m, kd, n, &a, &b, &mut fast, acc);
                gemm_nt_generic(m, kd, n, &a, &b, &mut slow, acc);
                close(&fast, &slow, 1e-4);
            }
        }
    }

    #[test]
    fn tn_matches_explicit_transpose() {
        let (kr, m, n) = (9, 6, 20);
        let a = rand_vec(kr * m, 7);
        let b = rand_vec(kr * n, 8);
        let mut out = vec![0.0f32; m * n];
        gemm_tn(kr, m, n, &a, &b, &mut out, false);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for r in 0..kr {
                    s += a[r * m + i] * b[r * n + j];
                }
                assert!((out[i * n + j] - s).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn f64_gemm_small_identity() {
        // 2x2 identity times an arbitrary matrix through the generic path.
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0f64, -1.0, 2.5, 0.5];
        let mut out = vec![0.0f64; 4];
        f64::gemm_nn(2, 2, 2, &a, &b, &mut out, false);
        assert_eq!(out, b);
    }
}
