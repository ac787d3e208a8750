//! Gaussian-mixture Wasserstein distances between feature sets, with the
//! Fréchet and kernel baselines, normality tests and the on-disk formats they share.

pub mod error;
pub mod featstore;
pub mod gaussian;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod normtest;
pub mod transport;

pub use error::{Error, Result};
pub use featstore::{DType, FeatureMatrix};
pub use gaussian::{fit_gaussian, w2_squared, Gaussian};
pub use gmm::{fit_gmm, EmConfig, Gmm, Transform};
pub use linalg::SymMatrix;
pub use metrics::{fid, kid, wam_squared, MetricName, MetricReport};
pub use transport::{mw2_squared, solve_discrete_ot, TransportPlan};
