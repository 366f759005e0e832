//! Deep layer aggregation: a graph IR for convolutional networks, builders
//! for residual blocks and iterative/hierarchical aggregation, a catalog of
//! classification and dense-prediction architectures, static cost and
//! structure analyses, and a small reference executor with analytic
//! gradients.

pub mod aggregation;
pub mod analysis;
pub mod architectures;
pub mod blocks;
pub mod document;
pub mod dot;
pub mod error;
pub mod ir;
pub mod numerics;

pub use error::BuildError;
pub use ir::{Graph, GraphBuilder, NodeId, PrimOp, TensorShape};

/// Executor types at the default precision.
pub type Tensor = numerics::Tensor<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type ForwardResult = numerics::ForwardResult<f64>;
pub type Gradients = numerics::Gradients<f64>;
