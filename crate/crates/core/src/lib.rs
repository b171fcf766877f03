//! Desk-scale training strategies for regression over frozen features.
//!
//! The crate bundles a self-contained reverse-mode differentiation core with
//! the training machinery built on top of it: bitwise target encoding that
//! turns regression into multi-bit classification, focal losses, orthogonal
//! weight modification for multi-task gradient projection, feature-pyramid
//! fusion, lightweight regression heads with deep ensembling, a
//! student-teacher self-distillation loop, synthetic data generation with
//! fixed split protocols, and a config-driven experiment harness.

pub mod codec;
pub mod data;
pub mod distill;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod owm;
pub mod pyramid;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Value};
