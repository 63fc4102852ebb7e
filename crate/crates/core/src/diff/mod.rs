//! Dense tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod linalg;
mod ops;
mod params;
mod sample;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId};
pub use ops::smooth_l1;
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;

