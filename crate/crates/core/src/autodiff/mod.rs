//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records one forward pass. Trainable state lives in
//! [`Parameter`]s outside the tape; each pass snapshots them with
//! [`Tape::param`], and after [`Tape::backward`] the gradients are copied
//! back with [`Tape::accumulate_grad`] before an [`AdamState::step`].

mod adam;
pub(crate) mod conv;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use tensor::{Parameter, Tensor};
