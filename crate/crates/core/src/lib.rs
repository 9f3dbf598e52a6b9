//! Communication-efficient surrogate likelihood (CSL) for distributed
//! estimation and inference.
//!
//! Data are split across k machines. Worker 1 builds a surrogate of the
//! global loss from its own shard plus one round of gradient communication,
//! and every downstream procedure (M-estimation, confidence intervals, the
//! lasso, posterior sampling) runs on that surrogate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod cluster;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod highdim;
pub mod inference;
pub mod model;
pub mod surrogate;

#[cfg(test)]
pub(crate) mod testutil;

pub use cluster::{Cluster, CommLedger, Transport};
pub use error::{Error, Result};
pub use estimators::{IleaMode, Initializer, SolverSettings};
pub use model::{DataShard, Link, LossModel};
pub use surrogate::{QuadraticSurrogate, SurrogateLoss};
