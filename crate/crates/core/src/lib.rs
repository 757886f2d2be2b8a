//! Kolmogorov–Arnold neural operators for semilinear elliptic PDEs and the
//! associated second-order BSDEs.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod fbno;
pub mod kano;
pub mod reskan;
pub mod sde;
pub mod spline;
pub mod tensor;

pub use error::{KanoError, Result};
pub use tensor::{ComplexGrid, DiffTensor, Gradients, Param, Tape};
