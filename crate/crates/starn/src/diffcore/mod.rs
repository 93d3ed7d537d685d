//! Tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{column_stats, matmul, matmul_nt, matmul_tn, Gradients, Graph, TensorRef};
pub use tensor::{Element, Tensor};
