use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{densities, log_sum_exp, FitRecord, Gmm, Transform, ROW_CHUNK};
use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;
use crate::gaussian::{weighted_scatter, Gaussian};
use crate::linalg::SymMatrix;

/// Expectation-maximization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when the mean per-sample log-likelihood changes by less than
    /// `rel_tol · max(1, |previous|)`.
    pub rel_tol: f64,
    /// Added to every covariance diagonal after each M-step.
    pub reg_covar: f64,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-3,
            reg_covar: 1e-6,
            n_init: 1,
            seed: 17,
        }
    }
}

impl EmConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidInput("rel_tol must be positive".into()));
        }
        if !(self.reg_covar >= 0.0 && self.reg_covar.is_finite()) {
            return Err(Error::InvalidInput("reg_covar must be nonnegative".into()));
        }
        if self.n_init == 0 {
            return Err(Error::InvalidInput("n_init must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fits a `k`-component full-covariance mixture.
///
/// Each of the `n_init` runs seeds means with k-means++, assigns every row to
/// its nearest seed, and iterates EM from the M-step of that hard assignment.
/// The run with the highest final log-likelihood wins. Components of the
/// result are in canonical order (see [`Gmm::sort_canonical`]).
pub fn fit_gmm(x: &FeatureMatrix, k: usize, cfg: &EmConfig) -> Result<Gmm> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if x.n_rows() < k {
        return Err(Error::InsufficientSamples {
            context: "k exceeds sample count",
            required: k,
            available: x.n_rows(),
        });
    }
    if x.n_cols() == 0 {
        return Err(Error::InvalidInput("feature matrix has no columns".into()));
    }

    let runs: Vec<Result<Gmm>> = (0..cfg.n_init)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(run as u64);
            fit_single(x, k, cfg, &mut rng)
        })
        .collect();

    let mut best: Option<Gmm> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(g) => {
                if best.as_ref().is_none_or(|b| g.meta.loglik > b.meta.loglik) {
                    best = Some(g);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some(mut g) => {
            g.sort_canonical();
            Ok(g)
        }
        None => Err(first_err.expect("n_init >= 1")),
    }
}

/// Applies `transform` to `x`, fits, and records the transform in the model.
pub fn fit_gmm_transformed(
    x: &FeatureMatrix,
    k: usize,
    cfg: &EmConfig,
    transform: Transform,
) -> Result<Gmm> {
    let data = transform.apply(x)?;
    let mut g = fit_gmm(&data, k, cfg)?;
    g.meta.transform = transform;
    Ok(g)
}

fn fit_single(x: &FeatureMatrix, k: usize, cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<Gmm> {
    let n = x.n_rows() as f64;
    let seeds = kmeans_plus_plus(x, k, rng);
    let resp = hard_assignment(x, &seeds);
    let mut model = m_step(x, &resp, k, cfg.reg_covar)?;
    let (mut loglik, mut resp) = e_step(&model, x)?;
    let mut history = vec![loglik];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iter {
        model = m_step(x, &resp, k, cfg.reg_covar)?;
        iterations += 1;
        let (next, next_resp) = e_step(&model, x)?;
        history.push(next);
        let prev_mean = loglik / n;
        let change = (next / n - prev_mean).abs();
        loglik = next;
        resp = next_resp;
        if change < cfg.rel_tol * prev_mean.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    model.meta = FitRecord {
        seed: cfg.seed,
        iterations,
        loglik,
        converged,
        loglik_history: history,
        transform: Transform::none(),
    };
    Ok(model)
}

/// k-means++ seeding: first center uniform, the rest by squared distance.
fn kmeans_plus_plus(x: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.n_rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(x.row(rng.random_range(0..n)).to_vec());
    let mut dist: Vec<f64> = x.rows().map(|r| sq_dist(r, &centers[0])).collect();

    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (d, r) in dist.iter_mut().zip(x.rows()) {
            *d = d.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One-hot responsibilities (row-major `n × k`) from the nearest seed.
fn hard_assignment(x: &FeatureMatrix, seeds: &[Vec<f64>]) -> Vec<f64> {
    let k = seeds.len();
    let mut resp = vec![0.0; x.n_rows() * k];
    for (i, row) in x.rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, s) in seeds.iter().enumerate() {
            let d = sq_dist(row, s);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        resp[i * k + best] = 1.0;
    }
    resp
}

/// Returns the total log-likelihood and row-major `n × k` responsibilities.
pub(crate) fn e_step(g: &Gmm, x: &FeatureMatrix) -> Result<(f64, Vec<f64>)> {
    let d = x.n_cols();
    let k = g.k();
    let dens = densities(g)?;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = x
        .data()
        .par_chunks(ROW_CHUNK * d)
        .map(|rows| {
            let per_comp: Vec<Vec<f64>> =
                dens.iter().map(|c| c.weighted_log_density(rows, d)).collect();
            let c = rows.len() / d;
            let mut resp = vec![0.0; c * k];
            let mut lls = Vec::with_capacity(c);
            for r in 0..c {
                let slot = &mut resp[r * k..(r + 1) * k];
                for (s, comp) in slot.iter_mut().zip(&per_comp) {
                    *s = comp[r];
                }
                let lse = log_sum_exp(slot);
                for s in slot.iter_mut() {
                    *s = (*s - lse).exp();
                }
                lls.push(lse);
            }
            (resp, lls)
        })
        .collect();

    let mut resp = Vec::with_capacity(x.n_rows() * k);
    let mut total = 0.0;
    for (r, lls) in chunks {
        resp.extend(r);
        total += lls.iter().sum::<f64>();
    }
    if !total.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite".into()));
    }
    Ok((total, resp))
}

/// Maximizes the expected complete-data log-likelihood given responsibilities.
pub(crate) fn m_step(x: &FeatureMatrix, resp: &[f64], k: usize, reg_covar: f64) -> Result<Gmm> {
    let d = x.n_cols();
    let fitted: Vec<Result<(f64, Gaussian)>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let weight_of = |i: usize| resp[i * k + j];
            let nk: f64 = (0..x.n_rows()).map(weight_of).sum();
            if !(nk > 0.0) {
                return Err(Error::DegenerateComponent { index: j });
            }

            let mut sum = DVector::zeros(d);
            for (i, row) in x.rows().enumerate() {
                let r = weight_of(i);
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += r * v;
                }
            }
            let mean = sum / nk;

            let scatter = weighted_scatter(x, &mean, weight_of);
            let mut cov = SymMatrix::symmetrized(&(scatter / nk))?;
            cov.add_diagonal(reg_covar);
            Ok((nk, Gaussian::new(mean, cov)?))
        })
        .collect();

    let mut masses = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);
    for f in fitted {
        let (nk, g) = f?;
        masses.push(nk);
        components.push(g);
    }
    let total: f64 = masses.iter().sum();
    let weights = masses.iter().map(|m| m / total).collect();
    let model = Gmm::new(weights, components, FitRecord::unfitted())?;
    // Reject covariances that cannot be factored now rather than in the next E-step.
    densities(&model)?;
    Ok(model)
}
