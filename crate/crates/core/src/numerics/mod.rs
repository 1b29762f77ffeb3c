//! Differentiable array values, the primitive inventory used by the model,
//! parameter management, checkpoints and finite-difference verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod tape;

use thiserror::Error;

pub use checkpoint::CheckpointError;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use matrix::{Matrix, Real};
pub use params::{Parameter, ParameterStore};
pub use tape::{Gradients, Primitive, Tape, Var};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}
