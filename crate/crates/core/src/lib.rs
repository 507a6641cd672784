//! Synthetic control estimation with a parallel-shift convex hull, Bayesian
//! posterior inference over the weights, and the comparator estimators.

pub mod bayes_scm;
pub mod error;
pub mod estimators;
pub mod panel;
pub mod qp;
pub mod sampling;
pub mod simlab;
pub mod stats;

pub use error::{Error, Result};
