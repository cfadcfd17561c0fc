//! Contrastive pretraining of session behavior-sequence encoders and
//! context-aware document ranking.

pub mod augment;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod objectives;
pub mod session;
pub mod training;

pub use error::{Error, Result};
