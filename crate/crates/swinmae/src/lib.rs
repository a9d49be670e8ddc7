//! Self-supervised pretraining of a windowed-attention autoencoder on
//! medical-style images, with downstream segmentation and classification
//! adapters, weight-transfer auditing, training schedules, and the
//! evaluation statistics (Dice, AUROC, bootstrap, DeLong, paired t-test)
//! needed to compare models.

pub mod adapt;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod patches;
pub mod rng;
pub mod stats;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
