//! Variable-length semantic identifiers for item embeddings.
//!
//! A residual encoder emits up to `T` discrete tokens per item plus a
//! distribution over where to stop; a causal decoder reconstructs the
//! embedding from every prefix. Training trades reconstruction against a
//! geometric length prior so frequent items get short codes.

pub mod autodiff;
pub mod baselines;
pub(crate) mod binio;
pub mod catalog;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use catalog::{Catalog, ItemDistribution, Slice, SynthConfig};
pub use encoder::{EncoderOutput, SemanticId};
pub use error::{Error, Result};
pub use model::{DvaeModel, ModelConfig};
pub use objective::{LossBreakdown, PriorConfig};
pub use trainer::{ModelState, TrainConfig, Trainer};
