//! Logistic regression regularized toward weights that hold across the
//! subpopulations of a non-i.i.d. training set.
//!
//! The flow: standardize and project onto principal components
//! ([`preprocess`]), discover subpopulations per class with k-means
//! ([`clustering`]), fit one anchor model per subpopulation and a joint model
//! penalized toward them ([`model`]), choose strengths by cluster-holdout
//! validation ([`selection`]) and compare against an l2 baseline by ROC AUC
//! ([`metrics`]). [`pipeline`] runs the whole experiment and writes reports.

pub mod clustering;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod selection;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
