//! Noise-robust speaker embeddings: online clean/noisy pair generation, a
//! residual embedding network with global statistics pooling, training with
//! an identification loss plus a within-sample variability-invariant loss,
//! and EER/minDCF/DET evaluation.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
