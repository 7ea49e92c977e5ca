//! Class-agnostic object detection with adversarial object-type
//! discriminators, plus the seen/unseen generalization benchmark.

pub mod adversarial;
pub mod dataset;
pub mod detector;
pub mod downstream;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod protocol;

pub use error::{Error, Result};
