//! Dense `f64` tensors, a reverse-mode tape, and the primitives every model
//! in the crate is built from.

mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod params;
mod tensor;

#[cfg(test)]
pub(crate) mod test_support;

pub use gradcheck::{gradient_check, DEFAULT_STEP};
pub use graph::{Graph, Var, LOG_EPS};
pub use optim::{grad_sq_norm, Adam};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::{argmax, Tensor};

pub(crate) use graph::conv_out_len;
