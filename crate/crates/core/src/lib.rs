//! Attribute-discriminative language modeling on the desk scale: a tape
//! autodiff engine, a small causal transformer, the two-round conditioning
//! recipe, contrastive decoding, and the evaluation harness around them.

pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, Var};
pub use model::{AdlmParams, ModelConfig, Partition, Stage, TrainScope};
pub use tensor::Tensor;
