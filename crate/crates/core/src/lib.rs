//! Streaming test-time out-of-distribution detection over precomputed
//! embeddings.
//!
//! A base detector scores each incoming image embedding against fixed ID
//! text features. Scores are pseudo-labeled with an adaptive threshold,
//! queued, and every `B` samples one gradient step moves a set of learnable
//! OOD text features toward pseudo-OOD samples. Updated features go into a
//! capacity-bounded knowledge bank, and each sample's final score is its
//! base score fused with its similarity to the bank.

pub mod bank;
pub mod config;
pub mod dataio;
pub mod detector;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod learner;
pub mod metrics;
pub mod runner;
pub mod synth;
pub mod vector;

pub use config::RunConfig;
pub use error::{Result, TtlError};
pub use vector::Embedding;
