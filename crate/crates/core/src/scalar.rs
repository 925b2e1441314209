use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors and tapes.
///
/// Training runs in `f32`; `f64` is used by oracles and finite-difference
/// checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }

    #[inline]
    fn softplus(self) -> Self {
        if self > Self::of(20.0) {
            self
        } else {
            self.exp().ln_1p()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
