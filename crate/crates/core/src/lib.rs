//! Patch-based cross-attention forecaster with ARMA-style feature
//! extraction and gated queries, built on a minimal reverse-mode
//! autodiff engine. Includes the data pipeline, trainer, independent
//! scalar-loop reference implementations, and verification suites.

pub mod data;
pub mod error;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vfe;

pub use error::{Error, Result};
pub use tensor::{backward, ParamSet, Parameter, Tensor};

/// Element type of the numeric engine. 64-bit by default; the
/// `single-precision` feature switches to 32-bit for speed.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;
