//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).
//!
//! Every op is a method on [`Graph`] that appends a node and returns its
//! [`Var`]. Feature maps use the `[N, C, H, W]` layout throughout.

mod conv;
mod elementwise;
mod gradcheck;
mod graph;
mod linalg;
mod loss;
mod norm;
mod pool;

pub use conv::conv_out_extent;
pub use gradcheck::{grad_check, random_projection, rel_error, uniform, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use norm::LAYERNORM_EPS;
pub use pool::nearest_index_map;

