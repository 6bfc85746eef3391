//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass together with the
//! values its backward rule needs. [`Tape::backward`] sweeps the record in
//! reverse once; parameter gradients are then routed into [`Param`]s by
//! name and consumed by an [`Optimizer`] step.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck, DEFAULT_STEP, REL_FLOOR};
pub use optim::{sgd_step, Adam, AdamConfig, Moments, Optimizer};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Param, Parameters, Tensor};
