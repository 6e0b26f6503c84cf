//! Differentiable substrate: tensors, a reverse-mode tape, MLPs, Adam and
//! checkpoints.

pub mod checkpoint;
mod mlp;
mod optim;
mod real;
mod tape;
mod tensor;

pub use mlp::{HiddenActivation, Mlp, MlpSpec, OutputActivation};
pub use optim::{AdamConfig, ParamId, ParamStore};
pub use real::Real;
pub use tape::{scalar, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
