//! Dense-array math for the dialogue models: a recording gradient tape over
//! 2-D tensors, the transformer layers built on it, AdamW, finite-difference
//! gradient checks and the `RPAC1` checkpoint container.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, TensorEntry, MAGIC};
pub use error::{NeuralError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{log_softmax, log_sum_exp, softmax_in_place, Graph, Mask, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
