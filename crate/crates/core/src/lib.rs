//! Upcycling instruction tuning at desk scale.
//!
//! A small dense causal transformer is instruction-tuned on a synthetic
//! multi-domain corpus while intermediate checkpoints are harvested. The
//! checkpoints become experts, the expert pool is grown by a genetic
//! merge-with-DARE loop, each expert is paired with a routing vector that is
//! pre-optimised on the seed samples it handles best, and everything is
//! assembled into a top-k mixture-of-experts model for post-training.

pub mod corpus;
pub mod error;
pub mod expansion;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod selection;
pub mod training;
pub mod upcycle;

pub use error::{CheckpointError, Error, Result};
