//! Dense tensors, a define-by-run reverse-mode tape, and Adam.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use params::{xavier, Dense, Mlp, ParamSet};
pub use tape::{sigmoid, softplus, Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
