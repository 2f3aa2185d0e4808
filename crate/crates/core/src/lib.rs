//! Distributed convoluted rank regression.
//!
//! Sparse linear regression with a kernel-smoothed pairwise rank loss, fitted
//! across data sites that exchange only coefficient vectors and gradients.
//! The master site minimises its own rank loss plus a linear gradient
//! correction assembled from all sites, first with an ℓ1 penalty and then
//! with folded-concave (SCAD/MCP) reweighting.
//!
//! Module map:
//! - [`smoothing`]: kernels and the smoothed absolute loss
//! - [`rank_loss`]: pairwise block loss, gradient, surrogate and correction
//! - [`penalty`]: ℓ1 / SCAD / MCP derivatives and soft thresholding
//! - [`prox`]: accelerated proximal gradient solver
//! - [`transport`]: wire format and in-process / TCP site clusters
//! - [`select`]: distributed HBIC and λ paths
//! - [`estimators`]: two-stage distributed fit and the baselines
//! - [`simlab`]: data generation, metrics and the Monte Carlo runner

// `!(x > 0.0)` is how the validators reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod penalty;
pub mod prox;
pub mod rank_loss;
pub mod select;
pub mod simlab;
pub mod smoothing;
pub mod transport;

pub use error::{Error, Result};
