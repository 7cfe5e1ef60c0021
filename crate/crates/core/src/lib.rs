//! Three-stage zero-shot panoptic segmentation on synthetic data.
//!
//! The pipeline trains a semantic projector with conditional token
//! alignment, fits a conditional VAE that generates vision queries from
//! semantic embeddings, and union-finetunes the projector on real seen and
//! generated unseen queries. Everything is built on the small
//! reverse-mode engine in [`diffcore`].

pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
