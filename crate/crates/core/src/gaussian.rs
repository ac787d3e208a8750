//! Multivariate Gaussians and the closed-form squared 2-Wasserstein distance
//!
//! `W₂²(N(μ₁,Σ₁), N(μ₂,Σ₂)) = ‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 tr((Σ₁^½ Σ₂ Σ₁^½)^½)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;
use crate::gmm::ROW_CHUNK;
use crate::linalg::{trace_sqrt_product, SymMatrix};

/// How the sample covariance is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceDenominator {
    /// Divide by `n − 1`.
    #[default]
    Unbiased,
    /// Divide by `n`, the maximum-likelihood estimate.
    MaxLikelihood,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: SymMatrix,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimMismatch {
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mean has non-finite entries".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and `n − 1` covariance.
pub fn fit_gaussian(x: &FeatureMatrix) -> Result<Gaussian> {
    fit_gaussian_with(x, CovarianceDenominator::Unbiased)
}

pub fn fit_gaussian_with(x: &FeatureMatrix, denom: CovarianceDenominator) -> Result<Gaussian> {
    let n = x.n_rows();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            context: "fitting a Gaussian",
            required: 2,
            available: n,
        });
    }
    if x.n_cols() == 0 {
        return Err(Error::InvalidInput("feature matrix has no columns".into()));
    }
    let mean = sample_mean(x);
    let scatter = weighted_scatter(x, &mean, |_| 1.0);
    let divisor = match denom {
        CovarianceDenominator::Unbiased => (n - 1) as f64,
        CovarianceDenominator::MaxLikelihood => n as f64,
    };
    let cov = SymMatrix::symmetrized(&(scatter / divisor))?;
    Gaussian::new(mean, cov)
}

/// Row-order sum divided by `n`.
pub(crate) fn sample_mean(x: &FeatureMatrix) -> DVector<f64> {
    let mut sum = DVector::zeros(x.n_cols());
    for row in x.rows() {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    sum / x.n_rows() as f64
}

/// `Σᵢ wᵢ (xᵢ − m)(xᵢ − m)ᵀ`, accumulated over fixed row blocks so the
/// unweighted fit and a single-component M-step round identically.
pub(crate) fn weighted_scatter(x: &FeatureMatrix, mean: &DVector<f64>, weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let d = x.n_cols();
    let mut scatter = DMatrix::zeros(d, d);
    for (c, rows) in x.data().chunks(ROW_CHUNK * d).enumerate() {
        let mut block = DMatrix::from_column_slice(d, rows.len() / d, rows);
        for (r, mut col) in block.column_iter_mut().enumerate() {
            let w = weight(c * ROW_CHUNK + r).sqrt();
            for (v, m) in col.iter_mut().zip(mean.iter()) {
                *v = (*v - m) * w;
            }
        }
        scatter += &block * block.transpose();
    }
    scatter
}

/// Negative results no larger than this (times `max(1, tr Σ₁ + tr Σ₂)`) are
/// cancellation noise and clamp to zero.
const W2_CLAMP: f64 = 1e-8;

pub fn w2_squared(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimMismatch {
            expected: g1.dim(),
            got: g2.dim(),
        });
    }
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    let t1 = g1.cov.trace();
    let t2 = g2.cov.trace();
    let cross = trace_sqrt_product(&g1.cov, &g2.cov)?;
    let value = mean_term + t1 + t2 - 2.0 * cross;
    if value >= 0.0 {
        Ok(value)
    } else if value >= -W2_CLAMP * (t1 + t2).max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "squared Wasserstein distance evaluated to {value:e}"
        )))
    }
}
