pub mod autograd;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod grpo;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod sparse;
pub mod tokenizer;

pub use error::{Error, Result};
