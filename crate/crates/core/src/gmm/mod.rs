//! Full-covariance Gaussian mixture models.
//!
//! [`fit_gmm`] runs expectation-maximization from a k-means++ seeding,
//! [`aic`] scores a fit and [`select_k`] picks the component count from an
//! AIC curve using the kneedle knee detector.

mod em;
mod knee;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;
use crate::gaussian::Gaussian;

pub use em::{fit_gmm, fit_gmm_transformed, EmConfig};
pub use knee::{aic_curve, select_k, KneeSelection, DEFAULT_SENSITIVITY, DEFAULT_SKIP_PREFIX};

/// Default offset inside the log transform.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-6;

/// Rows per work unit in the parallel E-step. Fixed so results do not
/// depend on the thread count.
pub(crate) const ROW_CHUNK: usize = 1024;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Elementwise `ln(x + epsilon)` feature transform, or the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub log: bool,
    pub epsilon: f64,
}

impl Transform {
    pub fn none() -> Self {
        Self {
            log: false,
            epsilon: 0.0,
        }
    }

    pub fn log(epsilon: f64) -> Self {
        Self { log: true, epsilon }
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.log {
            log_transform(x, self.epsilon)
        } else {
            Ok(x.clone())
        }
    }
}

impl Default for Transform {
    fn default() -> Self {
        Self::log(DEFAULT_LOG_EPSILON)
    }
}

/// `ln(x + epsilon)` elementwise. Features are post-ReLU, so negatives are rejected.
pub fn log_transform(x: &FeatureMatrix, epsilon: f64) -> Result<FeatureMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "log transform epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(idx) = x.data().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "negative feature value {} at index {idx}; log transform expects nonnegative features",
            x.data()[idx]
        )));
    }
    x.map(|v| (v + epsilon).ln())
}

/// How a [`Gmm`] was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub seed: u64,
    /// M-steps run after initialization.
    pub iterations: usize,
    /// Total log-likelihood of the training data under the returned parameters.
    pub loglik: f64,
    pub converged: bool,
    /// Total log-likelihood after initialization and after each M-step.
    pub loglik_history: Vec<f64>,
    pub transform: Transform,
}

impl FitRecord {
    pub fn unfitted() -> Self {
        Self {
            seed: 0,
            iterations: 0,
            loglik: 0.0,
            converged: false,
            loglik_history: Vec::new(),
            transform: Transform::none(),
        }
    }
}

/// A Gaussian mixture `Σᵢ πᵢ N(μᵢ, Σᵢ)`.
#[derive(Clone, Debug)]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    meta: FitRecord,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>, meta: FitRecord) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::DimMismatch {
                expected: components.len(),
                got: weights.len(),
            });
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginals {
                side: "mixture weight",
                sum,
            });
        }
        Ok(Self {
            weights,
            components,
            meta,
        })
    }

    /// A one-component mixture.
    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
            meta: FitRecord::unfitted(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn meta(&self) -> &FitRecord {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut FitRecord {
        &mut self.meta
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Free parameters: `(K−1) + K·d + K·d(d+1)/2`.
    pub fn parameter_count(&self) -> usize {
        parameter_count(self.k(), self.dim())
    }

    /// Sorts components by first mean coordinate, ties by weight descending.
    pub fn sort_canonical(&mut self) {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| {
            let ma = self.components[a].mean()[0];
            let mb = self.components[b].mean()[0];
            ma.total_cmp(&mb)
                .then(self.weights[b].total_cmp(&self.weights[a]))
        });
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.components = order.iter().map(|&i| self.components[i].clone()).collect();
    }

    /// Parameters equal, ignoring fit metadata.
    pub fn same_parameters(&self, other: &Gmm) -> bool {
        self.weights == other.weights && self.components == other.components
    }
}

pub fn parameter_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d * (d + 1) / 2
}

/// Cached Cholesky factor and normalizer of one component.
pub(crate) struct ComponentDensity {
    mean: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `ln π − ½(d ln 2π + ln det Σ)`.
    log_coeff: f64,
}

impl ComponentDensity {
    pub(crate) fn new(weight: f64, g: &Gaussian, index: usize) -> Result<Self> {
        let chol = Cholesky::new(g.cov().as_matrix().clone())
            .ok_or(Error::DegenerateComponent { index })?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::DegenerateComponent { index });
        }
        let d = g.dim() as f64;
        Ok(Self {
            mean: g.mean().iter().copied().collect(),
            chol,
            log_coeff: weight.ln() - 0.5 * (d * LN_2PI + log_det),
        })
    }

    /// Weighted log densities `ln π + ln φ(x)` for a block of rows given
    /// as a column-major `d × c` slice (i.e. row-major `c × d`).
    pub(crate) fn weighted_log_density(&self, rows: &[f64], d: usize) -> Vec<f64> {
        let c = rows.len() / d;
        let mut block = DMatrix::from_column_slice(d, c, rows);
        for mut col in block.column_iter_mut() {
            for (v, m) in col.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        self.chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut block);
        block
            .column_iter()
            .map(|col| self.log_coeff - 0.5 * col.norm_squared())
            .collect()
    }
}

pub(crate) fn densities(g: &Gmm) -> Result<Vec<ComponentDensity>> {
    g.weights
        .iter()
        .zip(&g.components)
        .enumerate()
        .map(|(i, (&w, c))| ComponentDensity::new(w, c, i))
        .collect()
}

/// `ln Σ exp(vᵢ)`, stable; `-inf` if every term is `-inf`.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-likelihood of every row, `ln Σᵢ πᵢ φ(x; μᵢ, Σᵢ)`, in row order.
pub(crate) fn per_row_log_likelihood(dens: &[ComponentDensity], x: &FeatureMatrix) -> Vec<f64> {
    let d = x.n_cols();
    let k = dens.len();
    let chunks: Vec<Vec<f64>> = x
        .data()
        .par_chunks(ROW_CHUNK * d)
        .map(|rows| {
            let per_comp: Vec<Vec<f64>> =
                dens.iter().map(|c| c.weighted_log_density(rows, d)).collect();
            let c = rows.len() / d;
            let mut scratch = vec![0.0; k];
            (0..c)
                .map(|r| {
                    for (s, comp) in scratch.iter_mut().zip(&per_comp) {
                        *s = comp[r];
                    }
                    log_sum_exp(&scratch)
                })
                .collect()
        })
        .collect();
    chunks.concat()
}

/// Total data log-likelihood under the mixture.
pub fn log_likelihood(g: &Gmm, x: &FeatureMatrix) -> Result<f64> {
    if x.n_cols() != g.dim() {
        return Err(Error::DimMismatch {
            expected: g.dim(),
            got: x.n_cols(),
        });
    }
    let dens = densities(g)?;
    Ok(per_row_log_likelihood(&dens, x).iter().sum())
}

/// Akaike information criterion, `2p − 2 ln L`.
pub fn aic(g: &Gmm, x: &FeatureMatrix) -> Result<f64> {
    let ll = log_likelihood(g, x)?;
    Ok(2.0 * g.parameter_count() as f64 - 2.0 * ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use nalgebra::DVector;

    fn gauss(mean: &[f64], diag: &[f64]) -> Gaussian {
        Gaussian::new(
            DVector::from_row_slice(mean),
            SymMatrix::from_diagonal(diag).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn log_transform_values() {
        let x = FeatureMatrix::from_column(vec![0.0, std::f64::consts::E - 1e-6]).unwrap();
        let y = log_transform(&x, 1e-6).unwrap();
        assert!((y.data()[0] - (-13.815_510_557_964_274)).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);

        let ones = FeatureMatrix::from_f64(2, 2, vec![1.0; 4]).unwrap();
        assert!(log_transform(&ones, 0.0).is_err());
        let y = log_transform(&ones, 1e-6).unwrap();
        let expected = (1.0f64 + 1e-6).ln();
        assert!(y.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn log_transform_rejects_negative() {
        let x = FeatureMatrix::from_column(vec![1.0, -0.5]).unwrap();
        assert!(matches!(log_transform(&x, 1e-6), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let g = Gmm::single(gauss(&[0.0], &[1.0]));
        let x = FeatureMatrix::from_column(vec![0.0]).unwrap();
        let ll = log_likelihood(&g, &x).unwrap();
        assert!((ll - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_double_log_likelihood() {
        let g = Gmm::new(
            vec![0.3, 0.7],
            vec![gauss(&[0.0, 1.0], &[1.0, 2.0]), gauss(&[3.0, -1.0], &[0.5, 0.5])],
            FitRecord::unfitted(),
        )
        .unwrap();
        let rows = vec![vec![0.1, 0.2], vec![2.5, -0.5], vec![-1.0, 3.0]];
        let once = FeatureMatrix::from_rows(&rows).unwrap();
        let twice = FeatureMatrix::from_rows(&[rows.clone(), rows].concat()).unwrap();
        let a = log_likelihood(&g, &once).unwrap();
        let b = log_likelihood(&g, &twice).unwrap();
        assert!((2.0 * a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(1, 1), 2);
        assert_eq!(parameter_count(2, 2), 11);
        let g = Gmm::single(gauss(&[0.0], &[1.0]));
        let x = FeatureMatrix::from_column(vec![0.0]).unwrap();
        let ll = log_likelihood(&g, &x).unwrap();
        assert!((aic(&g, &x).unwrap() - (4.0 - 2.0 * ll)).abs() < 1e-12);
    }

    #[test]
    fn gmm_new_validates() {
        let c = gauss(&[0.0], &[1.0]);
        assert!(Gmm::new(vec![0.5, 0.6], vec![c.clone(), c.clone()], FitRecord::unfitted()).is_err());
        assert!(Gmm::new(vec![1.0], vec![], FitRecord::unfitted()).is_err());
        let c2 = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(Gmm::new(vec![0.5, 0.5], vec![c, c2], FitRecord::unfitted()).is_err());
    }

    #[test]
    fn canonical_sort_order() {
        let mut g = Gmm::new(
            vec![0.2, 0.5, 0.3],
            vec![gauss(&[5.0], &[1.0]), gauss(&[-1.0], &[1.0]), gauss(&[5.0], &[2.0])],
            FitRecord::unfitted(),
        )
        .unwrap();
        g.sort_canonical();
        assert_eq!(g.weights(), &[0.5, 0.3, 0.2]);
        assert_eq!(g.components()[1].cov().get(0, 0), 2.0);
    }

    #[test]
    fn dim_mismatch() {
        let g = Gmm::single(gauss(&[0.0], &[1.0]));
        let x = FeatureMatrix::from_f64(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(log_likelihood(&g, &x), Err(Error::DimMismatch { .. })));
    }
}
