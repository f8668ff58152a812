//! Conditional computation Transformer at desk scale.
//!
//! Transformer sub-networks (attention key/value projections, attention query paths and
//! split feed-forward slices) are gated per token by small control networks. Training
//! uses noisy continuous gates and a multi-budget compute loss; inference thresholds the
//! gates and actually skips the disabled branches while counting executed flops.

pub mod analysis;
pub mod budget;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod infer;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod trace;

pub use error::{CctError, Result};
