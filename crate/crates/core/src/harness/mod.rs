//! Synthetic data, training, evaluation, ablations and sampling plots.

pub mod ablate;
pub mod eval;
pub mod gradsuite;
pub mod scene;
pub mod config;
pub mod sampling;
pub mod train;
