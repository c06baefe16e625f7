//! Dependency-ordered text-to-text judgment prediction.
//!
//! A synthetic case corpus is turned into masked prompts whose targets list
//! the judgment tasks (articles, charges, penalty, ...) in a configurable
//! order. A small encoder-decoder transformer written from scratch is
//! pretrained with span corruption, fine-tuned on those prompts and
//! evaluated with multi-label F1 and penalty log-distance.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prompting;
pub mod scalar;
pub mod tensor;
pub mod textmatch;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model used for training and inference.
pub type Model = model::Transformer<f32>;
/// Double-precision model used for gradient verification.
pub type Model64 = model::Transformer<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
/// Deterministic RNG used throughout.
pub type Rng = rand_chacha::ChaCha8Rng;
