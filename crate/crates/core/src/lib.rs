//! Continual domain adaptation for extractive machine reading comprehension.
//!
//! The crate bundles a small reverse-mode autograd engine, a BERT-style
//! encoder with a span-extraction head, bottleneck and projected-attention
//! adapters, the continual-learning strategies (plain fine-tuning, Fisher
//! penalized fine-tuning, progressive adapters, per-domain fine-tuning), and
//! the data and reporting tooling used to run domain-sequence experiments.

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod continual;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod qa;
pub mod results;
pub mod rng;
pub mod tensor;

pub use adapters::{AdapterConfig, AdapterInsertion, AdapterParams, AdapterStructure};
pub use autograd::{Gradients, Graph, Var};
pub use continual::{ContinualState, StrategyConfig, StrategyKind, TrainConfig};
pub use encoder::{EncoderConfig, ParamConvention};
pub use error::{Error, Result};
pub use qa::{QaExample, SpanPrediction};
pub use results::ResultsMatrix;
pub use tensor::Tensor;
