//! Minimal neural-network engine: tensors, the handful of layer kinds the
//! two networks need, first-order optimizers, and weight persistence.
//!
//! Everything is generic over [`scalar::Scalar`] so the exact same layer
//! code can be instantiated in `f64` for numerical verification while
//! production paths run in `f32`.

pub mod gradcheck;
pub mod grads;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod tensor;

pub use gradcheck::GradCheckReport;
pub use grads::ParamGrads;
pub use layers::{Conv2d, Dense, Dropout, LayerSpec, MaxPool2, Padding};
pub use optim::Optimizer;
pub use scalar::Scalar;
pub use tensor::Tensor;

use std::fmt;

/// Errors surfaced by the engine's fallible entry points.
///
/// Backward passes are deliberately infallible: they consume a cache value
/// that only a forward pass can produce, so "backward before forward" is
/// unrepresentable rather than a runtime error.
#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    /// An input tensor's shape is incompatible with a layer's parameters.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    /// A layer or optimizer was configured with an invalid hyperparameter.
    BadConfig { op: &'static str, detail: String },
    /// An optimizer step saw a NaN/Inf gradient; no parameter was touched.
    NonFiniteGrad { param: usize },
    /// An optimizer step found a parameter without an allocated gradient.
    MissingGrad { param: usize },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch { op, expected, found } => {
                write!(f, "{op}: shape mismatch, expected {expected}, found {found}")
            }
            NnError::BadConfig { op, detail } => write!(f, "{op}: bad config: {detail}"),
            NnError::NonFiniteGrad { param } => {
                write!(f, "optimizer: non-finite gradient for parameter {param}; step rejected")
            }
            NnError::MissingGrad { param } => {
                write!(f, "optimizer: parameter {param} has no gradient buffer")
            }
        }
    }
}

impl std::error::Error for NnError {}
