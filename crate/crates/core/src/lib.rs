pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;

pub use autodiff::{finite_difference_check, Aggregator, Gradients, NodeId, Tape};
pub use error::{DiffError, Error, Result};
pub use tensor::Tensor;
