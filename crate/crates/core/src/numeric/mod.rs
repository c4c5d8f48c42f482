//! Dense tensors, reverse-mode differentiation, gradient checking and Adam.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use gradcheck::{finite_diff_check, relative_error};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{argmax, softmax, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
