//! Semantic-matching intent classification with learnable class prototypes,
//! and post-hoc cosine scoring for out-of-distribution intent detection.

pub mod archive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod learner;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod prototypes;
pub mod scoring;
pub mod training;

pub use error::{Error, ErrorKind, Result};
