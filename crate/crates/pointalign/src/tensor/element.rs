//! Scalar element types the engine can run on.
//!
//! `f64` is the default for everything test- and verification-facing;
//! `f32` trades precision for roughly double the matrix throughput.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Floating-point element a [`super::Tape`] can compute with.
pub trait Element:
    'static
    + Copy
    + Send
    + Sync
    + PartialOrd
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// "f32" or "f64"; recorded in manifests.
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn expe(self) -> Self;
    fn abse(self) -> Self;
    fn is_finite_e(self) -> bool;

    /// c (m×n) += a (m×k) · b (k×n), all row-major contiguous.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);
    /// c (m×k) += a (m×n) · bᵀ where b is stored k×n row-major.
    fn gemm_nt(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]);
    /// c (m×k) += alpha · a (m×n) · bᵀ where b is stored k×n row-major.
    fn gemm_nt_alpha(m: usize, n: usize, k: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]);
    /// c (k×n) += aᵀ · b where a is stored m×k and b is m×n, row-major.
    fn gemm_tn(k: usize, m: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);
}

macro_rules! impl_element {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NAME: &'static str = $name;

            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn expe(self) -> Self {
                self.exp()
            }

            #[inline(always)]
            fn abse(self) -> Self {
                self.abs()
            }

            #[inline(always)]
            fn is_finite_e(self) -> bool {
                self.is_finite()
            }

            fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n,
                        1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        1.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                Self::gemm_nt_alpha(m, n, k, 1.0, a, b, c)
            }

            fn gemm_nt_alpha(
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                c: &mut [Self],
            ) {
                debug_assert!(a.len() == m * n && b.len() == k * n && c.len() == m * k);
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m, n, k,
                        alpha,
                        a.as_ptr(), n as isize, 1,
                        b.as_ptr(), 1, n as isize,
                        1.0,
                        c.as_mut_ptr(), k as isize, 1,
                    );
                }
            }

            fn gemm_tn(k: usize, m: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        k, m, n,
                        1.0,
                        a.as_ptr(), 1, k as isize,
                        b.as_ptr(), n as isize, 1,
                        1.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_element!(f64, "f64", matrixmultiply::dgemm);
impl_element!(f32, "f32", matrixmultiply::sgemm);
