//! Perturbation-aware variational autoencoder with a latent linear-Gaussian
//! structural causal model.
//!
//! The crate covers the whole experiment loop: a synthetic data generator
//! with a ground-truth latent SCM, identifiability audits on its parameters,
//! the model with hand-written backpropagation, training, evaluation metrics
//! (MCC, block R², population and pseudobulk metrics, linear probes), the
//! additive and PCA baselines, and latent-graph extraction.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod scm;
pub mod serde_util;
pub mod structure;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use numerics::{Matrix, RngStream, Vector};
pub use scm::{LatentSample, ScmParams};
