//! FID, WaM, KID, moment-discrepancy losses and perturbation ratios.

use std::fmt;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;
use crate::gaussian::{fit_gaussian_with, w2_squared, CovarianceDenominator, Gaussian};
use crate::gmm::{fit_gmm_transformed, EmConfig, Gmm, Transform};
use crate::linalg::{trace_sqrt_product, SymMatrix};
use crate::transport::{mw2_squared, TransportPlan};

/// Below this many rows per set the estimators are noticeably biased.
pub const RECOMMENDED_MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricName {
    Fid,
    Wam2,
    Kid,
    Ratio,
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricName::Fid => "FID",
            MetricName::Wam2 => "WAM2",
            MetricName::Kid => "KID",
            MetricName::Ratio => "RATIO",
        };
        f.write_str(s)
    }
}

/// One reported metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "metric")]
    pub metric_name: MetricName,
    pub value: f64,
    pub sample_sizes: (usize, usize),
    pub config_digest: String,
    pub notes: String,
}

impl MetricReport {
    pub fn new(
        metric_name: MetricName,
        value: f64,
        sample_sizes: (usize, usize),
        config: &str,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{metric_name} evaluated to {value}")));
        }
        if sample_sizes.0 == 0 || sample_sizes.1 == 0 {
            return Err(Error::InvalidInput("metric reports need at least one sample per set".into()));
        }
        Ok(Self {
            metric_name,
            value,
            sample_sizes,
            config_digest: config_digest(config),
            notes: String::new(),
        })
    }

    /// Bare value, e.g. a number quoted from a table.
    pub fn from_value(metric_name: MetricName, value: f64) -> Self {
        Self {
            metric_name,
            value,
            sample_sizes: (1, 1),
            config_digest: String::new(),
            notes: String::new(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// First 16 hex digits of the SHA-256 of a canonical config string.
pub fn config_digest(config: &str) -> String {
    let hash = Sha256::digest(config.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn check_pair(x_a: &FeatureMatrix, x_b: &FeatureMatrix) -> Result<()> {
    if x_a.n_cols() != x_b.n_cols() {
        return Err(Error::DimMismatch {
            expected: x_a.n_cols(),
            got: x_b.n_cols(),
        });
    }
    for n in [x_a.n_rows(), x_b.n_rows()] {
        if n < RECOMMENDED_MIN_SAMPLES {
            log::warn!("only {n} samples; at least {RECOMMENDED_MIN_SAMPLES} recommended");
        }
    }
    Ok(())
}

/// Options for [`fid_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidConfig {
    pub denominator: CovarianceDenominator,
    pub transform: Transform,
}

impl Default for FidConfig {
    fn default() -> Self {
        Self {
            denominator: CovarianceDenominator::Unbiased,
            transform: Transform::none(),
        }
    }
}

/// Fréchet distance between Gaussians fitted to raw features (squared).
pub fn fid(x_a: &FeatureMatrix, x_b: &FeatureMatrix) -> Result<MetricReport> {
    fid_with(x_a, x_b, &FidConfig::default())
}

pub fn fid_with(x_a: &FeatureMatrix, x_b: &FeatureMatrix, cfg: &FidConfig) -> Result<MetricReport> {
    check_pair(x_a, x_b)?;
    let a = cfg.transform.apply(x_a)?;
    let b = cfg.transform.apply(x_b)?;
    let ga = fit_gaussian_with(&a, cfg.denominator)?;
    let gb = fit_gaussian_with(&b, cfg.denominator)?;
    let value = w2_squared(&ga, &gb)?;
    let config = format!(
        "fid;denominator={:?};log={};epsilon={}",
        cfg.denominator, cfg.transform.log, cfg.transform.epsilon
    );
    MetricReport::new(MetricName::Fid, value, (x_a.n_rows(), x_b.n_rows()), &config)
}

/// Everything produced by [`wam_squared`].
#[derive(Clone, Debug)]
pub struct WamOutcome {
    pub report: MetricReport,
    pub gmm_a: Gmm,
    pub gmm_b: Gmm,
    pub plan: TransportPlan,
}

impl WamOutcome {
    /// Un-squared WaM.
    pub fn distance(&self) -> f64 {
        self.report.value.sqrt()
    }
}

pub(crate) fn wam_config(k_a: usize, k_b: usize, cfg: &EmConfig, transform: Transform) -> String {
    format!(
        "wam;k_a={k_a};k_b={k_b};seed={};max_iter={};rel_tol={};reg_covar={};n_init={};log={};epsilon={}",
        cfg.seed, cfg.max_iter, cfg.rel_tol, cfg.reg_covar, cfg.n_init, transform.log, transform.epsilon
    )
}

/// Squared WaM: fit a mixture to each set and solve the component-level
/// transport problem with `W₂²` ground costs.
pub fn wam_squared(
    x_a: &FeatureMatrix,
    x_b: &FeatureMatrix,
    k_a: usize,
    k_b: usize,
    cfg: &EmConfig,
    transform: Transform,
) -> Result<WamOutcome> {
    check_pair(x_a, x_b)?;
    let gmm_a = fit_gmm_transformed(x_a, k_a, cfg, transform)?;
    let gmm_b = fit_gmm_transformed(x_b, k_b, cfg, transform)?;
    let mw2 = mw2_squared(&gmm_a, &gmm_b)?;
    let report = MetricReport::new(
        MetricName::Wam2,
        mw2.value,
        (x_a.n_rows(), x_b.n_rows()),
        &wam_config(k_a, k_b, cfg, transform),
    )?;
    Ok(WamOutcome {
        report,
        gmm_a,
        gmm_b,
        plan: mw2.plan,
    })
}

/// `k(x, y) = (xᵀy / d + 1)³`.
pub fn cubic_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Options for [`kid_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct KidConfig {
    /// Average the estimator over disjoint blocks of this many rows per set
    /// instead of using the full sets.
    pub block_size: Option<usize>,
}

/// Unbiased squared MMD with the cubic polynomial kernel. Can be negative.
pub fn kid(x_a: &FeatureMatrix, x_b: &FeatureMatrix) -> Result<MetricReport> {
    kid_with(x_a, x_b, &KidConfig::default())
}

pub fn kid_with(x_a: &FeatureMatrix, x_b: &FeatureMatrix, cfg: &KidConfig) -> Result<MetricReport> {
    check_pair(x_a, x_b)?;
    let sizes = (x_a.n_rows(), x_b.n_rows());
    match cfg.block_size {
        None => {
            let value = mmd2_unbiased(x_a, x_b)?;
            MetricReport::new(MetricName::Kid, value, sizes, "kid;kernel=cubic;blocks=off")
        }
        Some(size) => {
            let (mean, std, blocks) = kid_blocks(x_a, x_b, size)?;
            let mut r = MetricReport::new(
                MetricName::Kid,
                mean,
                sizes,
                &format!("kid;kernel=cubic;block_size={size}"),
            )?;
            r.notes = format!("{blocks} blocks, std {std}");
            Ok(r)
        }
    }
}

/// Mean, standard deviation and count of block estimates.
pub fn kid_blocks(x_a: &FeatureMatrix, x_b: &FeatureMatrix, size: usize) -> Result<(f64, f64, usize)> {
    if size < 2 {
        return Err(Error::InvalidInput("KID block size must be at least 2".into()));
    }
    let blocks = (x_a.n_rows() / size).min(x_b.n_rows() / size);
    if blocks == 0 {
        return Err(Error::InsufficientSamples {
            context: "KID block",
            required: size,
            available: x_a.n_rows().min(x_b.n_rows()),
        });
    }
    let values: Vec<f64> = (0..blocks)
        .map(|i| {
            mmd2_unbiased(
                &x_a.slice_rows(i * size, (i + 1) * size),
                &x_b.slice_rows(i * size, (i + 1) * size),
            )
        })
        .collect::<Result<_>>()?;
    let mean = values.iter().sum::<f64>() / blocks as f64;
    let std = if blocks > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (blocks - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std, blocks))
}

/// Sum of kernel values over all pairs, excluding the diagonal when `a` and
/// `b` are the same set. Rows reduce in parallel, then in row order.
fn kernel_sum(a: &FeatureMatrix, b: &FeatureMatrix, same: bool) -> f64 {
    let row_sums: Vec<f64> = (0..a.n_rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            b.rows()
                .enumerate()
                .filter(|&(j, _)| !(same && i == j))
                .map(|(_, bj)| cubic_kernel(ai, bj))
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

fn mmd2_unbiased(x_a: &FeatureMatrix, x_b: &FeatureMatrix) -> Result<f64> {
    let (m, n) = (x_a.n_rows(), x_b.n_rows());
    for count in [m, n] {
        if count < 2 {
            return Err(Error::InsufficientSamples {
                context: "KID",
                required: 2,
                available: count,
            });
        }
    }
    if x_a.n_cols() == 0 {
        return Err(Error::InvalidInput("feature matrix has no columns".into()));
    }
    let (mf, nf) = (m as f64, n as f64);
    let kaa = kernel_sum(x_a, x_a, true) / (mf * (mf - 1.0));
    let kbb = kernel_sum(x_b, x_b, true) / (nf * (nf - 1.0));
    let kab = kernel_sum(x_a, x_b, false) / (mf * nf);
    Ok(kaa + kbb - 2.0 * kab)
}

/// Values of the four moment-discrepancy losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentLosses {
    /// `‖μ − μ₀‖²`
    pub mean: f64,
    /// `‖Σ − Σ₀‖_F`
    pub cov: f64,
    /// `½(mean + cov)`
    pub mean_cov: f64,
    /// `tr Σ + tr Σ₀ − 2 tr((Σ^½ Σ₀ Σ^½)^½)`
    pub w2_cov: f64,
}

pub fn moment_losses(
    mu: &DVector<f64>,
    sigma: &SymMatrix,
    mu0: &DVector<f64>,
    sigma0: &SymMatrix,
) -> Result<MomentLosses> {
    let d = mu0.len();
    for got in [mu.len(), sigma.dim(), sigma0.dim()] {
        if got != d {
            return Err(Error::DimMismatch { expected: d, got });
        }
    }
    let mean = (mu - mu0).norm_squared();
    let cov = (sigma.as_matrix() - sigma0.as_matrix()).norm();
    let w2 = sigma.trace() + sigma0.trace() - 2.0 * trace_sqrt_product(sigma, sigma0)?;
    Ok(MomentLosses {
        mean,
        cov,
        mean_cov: 0.5 * (mean + cov),
        w2_cov: w2.max(0.0),
    })
}

/// Moment losses of a feature set against stored reference moments.
pub fn moment_losses_against(x: &FeatureMatrix, reference: &Gaussian) -> Result<MomentLosses> {
    let g = fit_gaussian_with(x, CovarianceDenominator::Unbiased)?;
    moment_losses(g.mean(), g.cov(), reference.mean(), reference.cov())
}

/// Ratios of perturbed over original values and their quotient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SensitivityRatios {
    pub r_first: f64,
    pub r_second: f64,
    pub r: f64,
}

pub fn sensitivity_ratios(
    orig: &MetricReport,
    pert: &MetricReport,
    orig_other: &MetricReport,
    pert_other: &MetricReport,
) -> Result<SensitivityRatios> {
    for (a, b) in [(orig, pert), (orig_other, pert_other)] {
        if a.metric_name != b.metric_name {
            return Err(Error::MetricMismatch(
                a.metric_name.to_string(),
                b.metric_name.to_string(),
            ));
        }
    }
    ratios_from_values(orig.value, pert.value, orig_other.value, pert_other.value)
}

/// `r_first = pert / orig`, `r_second = pert_other / orig_other`, `r = r_first / r_second`.
pub fn ratios_from_values(
    orig: f64,
    pert: f64,
    orig_other: f64,
    pert_other: f64,
) -> Result<SensitivityRatios> {
    for v in [orig, pert, orig_other, pert_other] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("metric value {v} is not finite")));
        }
    }
    for v in [orig, orig_other] {
        if v <= 0.0 {
            return Err(Error::DivisionDomain(v));
        }
    }
    let r_first = pert / orig;
    let r_second = pert_other / orig_other;
    if r_second == 0.0 {
        return Err(Error::DivisionDomain(pert_other));
    }
    Ok(SensitivityRatios {
        r_first,
        r_second,
        r: r_first / r_second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cubic_kernel(&[1.0, 1.0], &[1.0, 1.0]), 8.0);
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let x = FeatureMatrix::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, 0.5],
            vec![1.0, 3.0],
            vec![4.0, 1.0],
        ])
        .unwrap();
        assert!(fid(&x, &x).unwrap().value <= 1e-8);
    }

    #[test]
    fn fid_of_shifted_set_is_shift_norm() {
        let rows = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0], vec![4.0, 1.0]];
        let a = FeatureMatrix::from_rows(&rows).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] + 3.0, r[1] - 4.0]).collect();
        let b = FeatureMatrix::from_rows(&shifted).unwrap();
        assert!((fid(&a, &b).unwrap().value - 25.0).abs() < 1e-9);
    }

    #[test]
    fn moment_loss_cases() {
        let mu0 = DVector::from_row_slice(&[1.0, 2.0]);
        let s0 = SymMatrix::from_lower(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.3, 1.0])).unwrap();
        let zero = moment_losses(&mu0, &s0, &mu0, &s0).unwrap();
        assert!(zero.mean == 0.0 && zero.cov == 0.0 && zero.mean_cov == 0.0);
        assert!(zero.w2_cov.abs() < 1e-12);

        let mu = DVector::from_row_slice(&[4.0, 6.0]);
        let l = moment_losses(&mu, &s0, &mu0, &s0).unwrap();
        assert!((l.mean - 25.0).abs() < 1e-12);
        assert_eq!(l.cov, 0.0);
        assert!((l.mean_cov - 12.5).abs() < 1e-12);
        assert!(l.w2_cov.abs() < 1e-12);

        let z = DVector::from_row_slice(&[0.0]);
        let l = moment_losses(
            &z,
            &SymMatrix::from_diagonal(&[4.0]).unwrap(),
            &z,
            &SymMatrix::from_diagonal(&[9.0]).unwrap(),
        )
        .unwrap();
        assert!((l.cov - 5.0).abs() < 1e-12);
        assert!((l.w2_cov - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_losses_dim_mismatch() {
        let a = DVector::zeros(2);
        let b = DVector::zeros(3);
        let s = SymMatrix::identity(2);
        assert!(matches!(
            moment_losses(&a, &s, &b, &s),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn ratio_cases() {
        let r = ratios_from_values(55.71, 154.19, 378.37, 424.29).unwrap();
        assert!((r.r_first - 2.77).abs() < 0.005);
        assert!((r.r_second - 1.12).abs() < 0.005);
        assert!((r.r - 2.47).abs() < 0.005);

        let same = ratios_from_values(3.0, 3.0, 7.0, 7.0).unwrap();
        assert_eq!((same.r_first, same.r_second, same.r), (1.0, 1.0, 1.0));

        assert!(matches!(
            ratios_from_values(0.0, 1.0, 1.0, 1.0),
            Err(Error::DivisionDomain(_))
        ));
    }

    #[test]
    fn ratio_requires_matching_metrics() {
        let fid = MetricReport::from_value(MetricName::Fid, 1.0);
        let wam = MetricReport::from_value(MetricName::Wam2, 1.0);
        assert!(matches!(
            sensitivity_ratios(&fid, &wam, &wam, &wam),
            Err(Error::MetricMismatch(..))
        ));
        assert!(sensitivity_ratios(&fid, &fid, &wam, &wam).is_ok());
    }

    #[test]
    fn report_json_is_single_line() {
        let r = MetricReport::new(MetricName::Wam2, 1.5, (10, 20), "x").unwrap();
        let j = r.to_json_line();
        assert!(!j.contains('\n'));
        assert!(j.starts_with(r#"{"metric":"WAM2","value":1.5,"sample_sizes":[10,20]"#), "{j}");
    }

    #[test]
    fn kid_needs_two_rows() {
        let one = FeatureMatrix::from_rows(&[vec![1.0]]).unwrap();
        let two = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(kid(&one, &two), Err(Error::InsufficientSamples { .. })));
    }
}
