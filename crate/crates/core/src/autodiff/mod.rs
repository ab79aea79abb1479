//! Dense tensors and a reverse-mode automatic differentiation tape.
//!
//! A [`Tape`] records every forward operation together with whatever the
//! backward pass needs. Trainable leaves are created with [`Tape::param`],
//! fixed inputs with [`Tape::constant`]; [`Tape::backward`] then returns the
//! gradient of a scalar loss with respect to every trainable leaf.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
