//! Kolmogorov–Smirnov normality tests on feature marginals.

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;

/// Minimum rows for [`marginal_normality_report`].
pub const MIN_MARGINAL_SAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub marginal_index: usize,
    /// Zero-variance column; counted as rejected.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalityReport {
    pub alpha: f64,
    pub fraction_rejected: f64,
    pub per_marginal: Vec<KsResult>,
}

impl NormalityReport {
    pub fn rejected(&self) -> usize {
        self.per_marginal
            .iter()
            .filter(|r| r.degenerate || r.p_value < self.alpha)
            .count()
    }
}

/// Standard normal CDF.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided statistic `D = maxᵢ max(i/n − F(xᵢ), F(xᵢ) − (i−1)/n)` over sorted samples.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InsufficientSamples {
            context: "KS statistic",
            required: 1,
            available: 0,
        });
    }
    if sorted.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("KS samples must be sorted ascending".into()));
    }
    let n = sorted.len() as f64;
    let d = sorted.iter().enumerate().fold(0.0f64, |acc, (i, &x)| {
        let f = cdf(x);
        let above = (i + 1) as f64 / n - f;
        let below = f - i as f64 / n;
        acc.max(above).max(below)
    });
    Ok(d.clamp(0.0, 1.0))
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
///
/// Uses `2 Σ (−1)^{j−1} exp(−2j²λ²)` for `λ ≥ 1`, truncated once terms drop
/// below 1e-12, and the equivalent theta-function form
/// `1 − (√(2π)/λ) Σ exp(−(2j−1)²π²/(8λ²))` below that, where the
/// alternating series converges slowly.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let scale = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let mut cdf = 0.0;
        for j in 1..=100 {
            let k = (2 * j - 1) as f64;
            let term = (-(k * k) * pi2 / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < 1e-16 {
                break;
            }
        }
        1.0 - scale * cdf
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            sum += sign * term;
            if term < 1e-12 {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    p.clamp(0.0, 1.0)
}

/// Asymptotic p-value with the small-sample correction
/// `λ = D(√n + 0.12 + 0.11/√n)`.
pub fn ks_pvalue(d: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidInput(format!("KS statistic {d} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::InsufficientSamples {
            context: "KS p-value",
            required: 1,
            available: 0,
        });
    }
    if d == 0.0 {
        return Ok(1.0);
    }
    let sn = (n as f64).sqrt();
    Ok(kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn)))
}

/// Tests one column against a normal with the column's own mean and standard deviation.
fn test_marginal(mut values: Vec<f64>, index: usize) -> Result<KsResult> {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs() {
        return Ok(KsResult {
            statistic: 1.0,
            p_value: 0.0,
            n,
            marginal_index: index,
            degenerate: true,
        });
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    values.sort_by(f64::total_cmp);
    let statistic = ks_statistic(&values, standard_normal_cdf)?;
    Ok(KsResult {
        statistic,
        p_value: ks_pvalue(statistic, n)?,
        n,
        marginal_index: index,
        degenerate: false,
    })
}

/// KS-tests every column for normality and reports the fraction rejected at `alpha`.
pub fn marginal_normality_report(x: &FeatureMatrix, alpha: f64) -> Result<NormalityReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if x.n_rows() < MIN_MARGINAL_SAMPLES {
        return Err(Error::InsufficientSamples {
            context: "marginal normality test",
            required: MIN_MARGINAL_SAMPLES,
            available: x.n_rows(),
        });
    }
    if x.n_cols() == 0 {
        return Err(Error::InvalidInput("feature matrix has no columns".into()));
    }
    let per_marginal: Vec<KsResult> = (0..x.n_cols())
        .into_par_iter()
        .map(|j| test_marginal(x.column(j), j))
        .collect::<Result<_>>()?;
    let mut report = NormalityReport {
        alpha,
        fraction_rejected: 0.0,
        per_marginal,
    };
    report.fraction_rejected = report.rejected() as f64 / x.n_cols() as f64;
    Ok(report)
}
