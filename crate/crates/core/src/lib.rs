//! Oracle-world benchmarking: class-conditional densities with exact
//! likelihoods, exact Bayes posteriors, and the split of a classifier's
//! cross-entropy into an aleatoric floor and an epistemic gap.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod numcore;
pub mod oracle;
mod persist;
pub mod validate;

pub use error::{Error, Result};
pub use persist::FORMAT_VERSION;
