//! Dense rank ≤ 2 arrays with a recording tape and exact reverse-mode gradients.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Axis, BinaryKind, Gradients, ReduceKind, Tape, UnaryKind};
pub use tensor::{NodeRef, Tensor};

pub(crate) use tape::{matmul_raw, transpose_raw};
