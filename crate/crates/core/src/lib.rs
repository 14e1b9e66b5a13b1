//! Synthetic clinical-note generation and multi-angle evaluation.

pub mod chunker;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod prompts;
pub mod rephraser;
pub mod score;
pub mod intrinsic;
pub mod concepts;
pub mod factcheck;
pub mod downstream;
pub mod fairness;
pub mod pipeline;
pub mod demo;
mod par;

pub use error::{Error, Result};
