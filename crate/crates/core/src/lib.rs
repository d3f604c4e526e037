//! Span-based multi-label named entity recognition with knowledge
//! distillation for class-incremental continual learning, plus the
//! sequence-labeling baselines, benchmark synthesis, and evaluation needed
//! to compare them.

pub mod baselines;
pub mod cldata;
pub mod clrunner;
pub mod commands;
pub mod encoder;
pub mod error;
pub mod learner;
pub mod manifest;
pub mod metrics;
pub mod numcore;
pub mod spankl;
pub mod types;

pub use error::{Error, Result};
pub use types::{Sentence, Span};
