//! Physics-guided masked-autoencoder pretraining for channel state
//! information.
//!
//! The crate covers the whole pipeline: geometric channel simulation
//! ([`channel`]), deterministic CSI transforms ([`pipeline`]), the MAE
//! backbone ([`model`]), the structure- and parameter-aware priors
//! ([`prior`]), stage-wise pretraining ([`training`]) and frozen-encoder
//! transfer tasks ([`downstream`]).

pub mod channel;
pub mod checkpoint;
pub mod cmatrix;
pub mod config;
pub mod dataset;
pub mod downstream;
mod error;
pub mod model;
pub mod pipeline;
pub mod prior;
pub mod training;

pub use error::{Error, Result};
