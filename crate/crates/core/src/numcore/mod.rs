//! Dense numeric substrate: tensors, kernels, a reverse-mode tape, and a
//! reproducible random source.

mod gradcheck;
mod graph;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, sample_coords, CoordCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{cross_entropy, gelu, matmul, softmax_rows};
pub use rng::Rng;
pub use tensor::Tensor;

/// Named parameter tensors in a stable order.
pub type ParamSet = indexmap::IndexMap<String, Tensor>;
