//! Minimal dense-tensor numerics: a per-step gradient tape, the layers the
//! encoders, heads and policies need, Adam, finite-difference checking and
//! parameter checkpoints.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Binding, Conv2d, Linear, Mlp};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use param::{blend_params, copy_params, Module, ParamId, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
