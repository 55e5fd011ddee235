//! Scalar abstraction shared by every numeric module.
//!
//! Storage is generic (`f32` for training, `f64` for gradient checking);
//! reductions always accumulate in `f64` via [`Scalar::widen`].

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating point element type of tensors and parameters.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in diagnostics ("f32", "f64").
    const NAME: &'static str;

    fn widen(self) -> f64;

    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Dot product with eight independent `f64` lanes, reduced in a fixed order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l].widen() * y[l].widen();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.widen() * y.widen();
    }
    let s0 = (lanes[0] + lanes[4]) + (lanes[1] + lanes[5]);
    let s1 = (lanes[2] + lanes[6]) + (lanes[3] + lanes[7]);
    (s0 + s1) + tail
}

/// `acc += alpha * x`, accumulating into a wide buffer.
#[inline]
pub fn axpy_wide<S: Scalar>(acc: &mut [f64], alpha: f64, x: &[S]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v.widen();
    }
}

/// Sum of a slice accumulated in `f64`.
#[inline]
pub fn sum_wide<S: Scalar>(x: &[S]) -> f64 {
    x.iter().map(|v| v.widen()).sum()
}
