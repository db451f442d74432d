//! Dense numeric substrate: tensors, matrix products, row softmax,
//! normalization, and seeded Gaussian sampling.
//!
//! Everything downstream (model, flow, training) builds on the handful of
//! operations here. All values are stored as `f64`; the active
//! [`Precision`] decides whether arithmetic is carried out in 32-bit or
//! 64-bit IEEE floats. In 32-bit mode every operation rounds through `f32`,
//! so stored values are always exactly `f32`-representable and files with
//! 32-bit payloads round-trip bitwise.

mod ops;
mod rng;
mod tensor;

pub(crate) use ops::RMS_EPS;
pub use ops::{
    add, add_gated, add_row, add_scaled, matmul, modulate, mul, mul_row, rms_norm, scale, silu,
    softmax_rows, sub, transpose,
};
pub use rng::Rng;
pub use tensor::Tensor;

use std::cell::Cell;

/// Arithmetic precision for all numeric operations.
///
/// 32-bit is the default; 64-bit is used for verification runs (gradient
/// checks, bitwise reversibility oracles).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

/// Currently active precision on this thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Switch the active precision. The switch is per thread so that parallel
/// test runs cannot interfere with each other; a single-threaded CLI run
/// sees it as a global.
pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Run `f` with the given precision, restoring the previous one afterwards.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

/// Scalar arithmetic in the active precision.
///
/// Internal kernels are generic over this trait and get dispatched once per
/// operation, so a 32-bit run performs genuine `f32` arithmetic end to end.
pub(crate) trait Real: Copy {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn div(self, rhs: Self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn max(self, rhs: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn add(self, rhs: Self) -> Self {
                self + rhs
            }
            #[inline]
            fn sub(self, rhs: Self) -> Self {
                self - rhs
            }
            #[inline]
            fn mul(self, rhs: Self) -> Self {
                self * rhs
            }
            #[inline]
            fn div(self, rhs: Self) -> Self {
                self / rhs
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn max(self, rhs: Self) -> Self {
                self.max(rhs)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Round a value to the active precision.
pub fn quantize(x: f64) -> f64 {
    match precision() {
        Precision::F32 => x as f32 as f64,
        Precision::F64 => x,
    }
}
