//! Low-precision ensembling: turn one full-precision MLP checkpoint into an
//! ensemble of stochastically rounded INT-B members, evaluate it, compare it
//! with rounding-to-nearest and noise baselines, and map the loss landscape
//! around it.

pub mod cli;
pub mod ensembler;
pub mod error;
pub mod landscape;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod storage;
pub mod tensor;

pub use ensembler::{EnsembleSpec, Member, MemberLayer, MemberSet, Method, PredictionBatch};
pub use error::{Error, Result};
pub use metrics::{Dataset, Decomposition, EvalReport};
pub use nn::{Activation, Checkpoint, ModelSpec, TrainConfig};
pub use quantizer::{QuantGridSet, QuantizedTensor};
pub use tensor::Tensor;
