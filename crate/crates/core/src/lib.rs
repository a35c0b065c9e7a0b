//! Character-consistent role-playing dialogue at desk scale.

pub mod classifier;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{CoreError, Result};
pub use charkeeper_neural as neural;
