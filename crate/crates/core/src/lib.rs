//! Reward engineering for reinforcement-learned image captioning.
//!
//! The crate pairs a consensus reward (CIDEr-D) with two discriminative
//! signals: a word-level bonus for rare, informative n-grams (`LD`) and a
//! retrieval-margin penalty computed in a joint image/caption embedding
//! space (`GD`). A small log-linear policy and a synthetic image world make
//! the full training loop runnable on a laptop.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod ngram_stats;
pub mod policy;
pub mod report;
pub mod rewards;
pub mod rng;
pub mod toy_world;
pub mod train;

pub use error::{Error, Result};
