//! Minimal reverse-mode differentiable computation substrate.
//!
//! Everything trainable in this workspace runs on [`Tape`]: a dynamically
//! built computation graph over dense f64 tensors with a fixed, sequential
//! reduction order. The crate also provides the named parameter store with
//! deterministic initialization, Adam, a central-difference gradient
//! checker, and the binary checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{evaluate, grad_check, Binder, Evaluation, GradCheckReport};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{Init, ParameterSet};
pub use tape::{CustomOp, Gradients, NodeId, Tape};
pub use tensor::Tensor;
