//! Desk-scale laboratory for temporal distribution shift in recommendation.
//!
//! The crate covers the whole loop: a causal synthetic generator with stable
//! and time-varying factors, feature-type-specific augmentations, a twin-tower
//! model trained with a reconstruction + view-consistency variational
//! objective under a single-pass incremental protocol, baselines, and the
//! metrics used to compare them.

#![forbid(unsafe_code)]

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
