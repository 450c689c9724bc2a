//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Only the primitives used by the reconstruction networks are provided.
//! Shapes are always explicit; the single broadcasting operation is
//! [`Tape::add_bias`].

pub mod gradcheck;
mod mat;
pub mod polar;
mod tape;

pub use mat::Mat;
pub use tape::{logsumexp_slice, Tape, Var, NORM_EPS};

/// Slope of the leaky-ReLU used for every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;
