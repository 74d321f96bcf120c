//! Capsule networks, CNN training with transfer-style schedules, conversion of
//! CNNs to rate-coded spiking networks, an integrate-and-fire simulator, and
//! the metrics and energy arithmetic used to compare them.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capsnet;
pub mod data;
pub mod energy;
pub mod error;
mod format;
pub mod metrics;
pub mod model;
pub mod pca;
pub mod report;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
