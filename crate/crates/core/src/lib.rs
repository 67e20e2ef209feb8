//! Hybrid rating prediction with feature-level self-attention.
//!
//! A user's and an item's categorical features are embedded, mixed by a
//! multi-head self-attention block with top-K filtering, pooled into content
//! vectors, and blended with collaborative latent vectors through learned
//! gates. The crate also ships a BiasedMF baseline, the data pipeline,
//! training and evaluation, a checkpoint format and a CLI.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod train;
