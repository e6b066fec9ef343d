//! Desk-scale rare-word experiment: synthetic corpus, streaming toy encoder,
//! CTC pre-training and discriminative fine-tuning.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Result, ToyError};
pub use train::{LossKind, TrainState};
