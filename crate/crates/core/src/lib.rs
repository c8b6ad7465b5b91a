//! Linear-time gated state-space image encoder trained with prototype-based
//! teacher–student self-distillation over multi-crop views, plus the
//! benchmark suite that checks the linear-in-tokens compute claim against a
//! quadratic attention reference.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod head;
pub mod train;
pub mod tensor;

pub use tensor::{Fill, Tape, Tensor, TensorError, Var};
