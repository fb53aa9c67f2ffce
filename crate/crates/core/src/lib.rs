//! Gradient-based attributions for small image and text classifiers, and
//! the tooling to audit them: cascading parameter randomization, label
//! randomization, infidelity / max-sensitivity, and explanation similarity.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`graph`]), so attribution identities such as completeness can
//! be checked at tight tolerances.

pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod report;
pub mod seed;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
