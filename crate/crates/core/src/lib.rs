//! Two-stage capsule-network classification of CT volumes.
//!
//! Stage one flags slices that show infection; stage two classifies the
//! flagged slices and an average vote turns slice probabilities into a
//! patient-level decision. Patients with too few flagged slices are
//! short-circuited to non-COVID before stage two runs.

pub mod capsule;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
