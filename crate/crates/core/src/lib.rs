//! Latent-attention masked autoencoders for multi-view image sequences.
//!
//! The crate covers the four model variants (per-frame MAE, clip-level
//! VideoMAE, and their latent-attention counterparts), pretraining and
//! finetuning loops, a synthetic multi-view study generator, ICD-10 label
//! processing, evaluation metrics, checkpoints, and report plotting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod report;
pub mod rng;
pub mod train;
pub mod vit;

pub use config::{ModelConfig, RunConfig, Task, Variant};
pub use error::{LamaeError, Result};
