//! Dense arrays and a minimal reverse-mode autodiff engine.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*64`/`*32`
//! aliases below are the concrete types the rest of the workspace uses.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod rng;
pub mod scalar;

pub use array::{numel, strides_of, Array};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{BackwardFn, Graph, Var};
pub use rng::Rng;
pub use scalar::{DType, Scalar};

pub type Array64 = Array<f64>;
pub type Array32 = Array<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
