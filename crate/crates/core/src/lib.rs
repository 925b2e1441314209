//! Core numerics for cross-modality state-space fusion.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`ops`] and [`tape`] form a small dense-tensor substrate with
//!   tape-based reverse-mode differentiation over a fixed op set.
//! * [`ssm`] holds the 1D state-space machinery: zero-order-hold
//!   discretization, the recurrent scan, the convolution-kernel form and the
//!   input-dependent (selective) parameterization.
//! * [`ss2d`] expands a 2D map into four directional scans and merges them.
//! * [`fusion`] composes VSS blocks, channel swapping and the gated dual
//!   hidden-state fusion into the fusion block used by the detector.
//! * [`gradcheck`] and [`selfcheck`] validate the above numerically.

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod selfcheck;
pub mod ss2d;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Binding, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
