//! Sparse-autoencoder steering for machine unlearning.
//!
//! A toy transformer backend with residual-stream hooks, SAE latent
//! steering driven by Steering CSV files, activation-frequency feature
//! selection, a multiple-choice evaluation harness with retention and
//! alignment metrics, an RMU baseline trainer and a greedy suffix attack.

pub mod adversarial;
pub mod error;
pub mod evaluation;
pub mod feature_selection;
pub mod fixtures;
pub mod model;
pub mod rmu;
pub mod rng;
pub mod sae;
pub mod steering;
pub mod steering_csv;

pub use error::{Error, Result};
