//! Dense tensors, a reverse-mode tape and the optimizer.

mod optim;
mod tape;
mod tensor;

pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, ParamSlot};
pub use tape::{rope_apply, AttnDims, MaskLayout, Tape, Var};
pub use tensor::{cosine, dot, softmax_in_place, Scalar, Tensor};

pub mod gradcheck;
