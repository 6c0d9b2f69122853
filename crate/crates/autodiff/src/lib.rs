//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a define-by-run tape: each primitive is evaluated when it
//! is recorded and [`Graph::backward`] sweeps the tape in reverse. Models
//! train in `f32`; [`gradcheck`] verifies every primitive in `f64` against
//! central finite differences.

mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use conv::{conv_output_size, conv_transpose_output_size, ConvOptions};
pub use error::{AutodiffError, Result};
pub use graph::{Graph, NodeId};
pub use ops::{BatchNormMode, BatchStatistics};
pub use scalar::Scalar;
pub use tensor::Tensor;
