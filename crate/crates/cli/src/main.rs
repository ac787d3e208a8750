//! `wam`: fit mixtures, choose K and compute FID, WaM², KID and KS reports on feature files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use wam_core::featstore::{read_features, read_model, write_model};
use wam_core::gaussian::CovarianceDenominator;
use wam_core::gmm::{aic, aic_curve, fit_gmm_transformed, select_k, EmConfig, Gmm, Transform};
use wam_core::metrics::{fid_with, kid_with, ratios_from_values, FidConfig, KidConfig, MetricName};
use wam_core::normtest::marginal_normality_report;
use wam_core::transport::mw2_squared;
use wam_core::{Error, FeatureMatrix};

#[derive(Parser, Debug)]
#[command(name = "wam", version, about = "Wasserstein distances between Gaussian mixtures of image features")]
struct Cli {
    /// Seed for EM initialization.
    #[arg(long, global = true, default_value_t = 17)]
    seed: u64,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Emit machine-readable JSON on stdout; `--json false` prints `key: value` lines.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a Gaussian mixture and write it as a gmm-v1 model.
    Fit(FitArgs),
    /// Score K over a grid with AIC and pick the knee.
    ChooseK(ChooseKArgs),
    /// Squared WaM between two feature sets or fitted models.
    Wam(WamArgs),
    /// Squared Fréchet distance between Gaussian fits.
    Fid(FidArgs),
    /// Unbiased squared MMD with the cubic polynomial kernel.
    Kid(KidArgs),
    /// Kolmogorov–Smirnov normality test of every feature column.
    Ks(KsArgs),
    /// Perturbation sensitivity ratios from metric values.
    Ratio(RatioArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct TransformArgs {
    /// Offset added before the log transform.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,

    /// Fit on raw features instead of ln(x + epsilon).
    #[arg(long)]
    no_log_transform: bool,
}

impl TransformArgs {
    fn transform(&self) -> Transform {
        if self.no_log_transform {
            Transform::none()
        } else {
            Transform::log(self.epsilon)
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if !self.no_log_transform && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::usage(format!("--epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone, Copy)]
struct EmArgs {
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Relative change in mean per-sample log-likelihood that stops EM.
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    reg_covar: f64,
    #[arg(long, default_value_t = 1)]
    n_init: usize,
}

impl EmArgs {
    fn config(&self, seed: u64) -> Result<EmConfig, CliError> {
        let cfg = EmConfig {
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            reg_covar: self.reg_covar,
            n_init: self.n_init,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    transform: TransformArgs,
    #[command(flatten)]
    em: EmArgs,
}

#[derive(Args, Debug)]
struct ChooseKArgs {
    #[arg(long)]
    features: PathBuf,
    /// Largest K of the default grid.
    #[arg(long, default_value_t = 50)]
    k_max: usize,
    /// Step of the default grid 1, 1+s, 1+2s, ...
    #[arg(long, default_value_t = 1)]
    k_stride: usize,
    /// Explicit grid, e.g. 1,5,10,20; overrides --k-max and --k-stride.
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    sensitivity: f64,
    /// Leading grid points ignored by the knee search.
    #[arg(long, default_value_t = 2)]
    skip: usize,
    /// Also write the curve as CSV.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[command(flatten)]
    transform: TransformArgs,
    #[command(flatten)]
    em: EmArgs,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("side_a").required(true).args(["features_a", "model_a"])))]
#[command(group(clap::ArgGroup::new("side_b").required(true).args(["features_b", "model_b"])))]
struct WamArgs {
    #[arg(long)]
    features_a: Option<PathBuf>,
    #[arg(long)]
    model_a: Option<PathBuf>,
    #[arg(long)]
    features_b: Option<PathBuf>,
    #[arg(long)]
    model_b: Option<PathBuf>,
    /// Components for both sides unless --k-a / --k-b are given.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_a: Option<usize>,
    #[arg(long)]
    k_b: Option<usize>,
    #[command(flatten)]
    transform: TransformArgs,
    #[command(flatten)]
    em: EmArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Denominator {
    /// n − 1
    Unbiased,
    /// n
    Ml,
}

#[derive(Args, Debug)]
struct FidArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[arg(long, value_enum, default_value_t = Denominator::Unbiased)]
    covariance: Denominator,
    /// Apply ln(x + epsilon) before fitting (off by default for FID).
    #[arg(long)]
    log_transform: bool,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
}

#[derive(Args, Debug)]
struct KidArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    /// Average over disjoint blocks of this many rows per set.
    #[arg(long)]
    block_size: Option<usize>,
}

#[derive(Args, Debug)]
struct KsArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Include the statistic and p-value of every column.
    #[arg(long)]
    per_marginal: bool,
}

#[derive(Args, Debug)]
struct RatioArgs {
    #[arg(long, allow_negative_numbers = true)]
    orig: f64,
    #[arg(long, allow_negative_numbers = true)]
    pert: f64,
    #[arg(long, allow_negative_numbers = true)]
    orig_other: f64,
    #[arg(long, allow_negative_numbers = true)]
    pert_other: f64,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn load_features(path: &Path) -> Result<FeatureMatrix, CliError> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    let m = read_features(BufReader::new(f)).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })?;
    log::info!("read {} ({} x {})", path.display(), m.n_rows(), m.n_cols());
    Ok(m)
}

fn load_model(path: &Path) -> Result<Gmm, CliError> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    read_model(BufReader::new(f)).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn positive(name: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        Err(CliError::usage(format!("{name} must be at least 1")))
    } else {
        Ok(v)
    }
}

fn cmd_fit(a: &FitArgs, seed: u64) -> Result<Value, CliError> {
    a.transform.validate()?;
    let cfg = a.em.config(seed)?;
    let k = positive("--k", a.k)?;
    let x = load_features(&a.features)?;
    let transform = a.transform.transform();
    let g = fit_gmm_transformed(&x, k, &cfg, transform)?;
    let score = aic(&g, &transform.apply(&x)?)?;
    let f = File::create(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut w = BufWriter::new(f);
    write_model(&g, &mut w)?;
    w.flush().map_err(|e| io_error(&a.out, e))?;
    Ok(json!({
        "k": g.k(),
        "loglik": g.meta().loglik,
        "aic": score,
        "iterations": g.meta().iterations,
    }))
}

fn grid(a: &ChooseKArgs) -> Result<Vec<usize>, CliError> {
    let ks = match &a.k_grid {
        Some(ks) => ks.clone(),
        None => {
            positive("--k-max", a.k_max)?;
            positive("--k-stride", a.k_stride)?;
            (1..=a.k_max).step_by(a.k_stride).collect()
        }
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("--k-grid values must be positive"));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::usage("--k-grid must be strictly increasing"));
    }
    Ok(ks)
}

fn cmd_choose_k(a: &ChooseKArgs, seed: u64) -> Result<Value, CliError> {
    a.transform.validate()?;
    let cfg = a.em.config(seed)?;
    let ks = grid(a)?;
    if !(a.sensitivity >= 0.0 && a.sensitivity.is_finite()) {
        return Err(CliError::usage("--sensitivity must be nonnegative"));
    }
    if ks.len().saturating_sub(a.skip) < 3 {
        return Err(Error::InsufficientCurve {
            usable: ks.len().saturating_sub(a.skip),
        }
        .into());
    }
    let x = a.transform.transform().apply(&load_features(&a.features)?)?;
    let curve = aic_curve(&x, &ks, &cfg)?;
    let sel = select_k(&curve, a.sensitivity, a.skip)?;
    if let Some(path) = &a.plot {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?);
        let mut body = String::from("k,aic\n");
        for (k, v) in &curve {
            body.push_str(&format!("{k},{v}\n"));
        }
        w.write_all(body.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| io_error(path, e))?;
    }
    Ok(json!({
        "k_star": sel.k,
        "fallback_used": sel.fallback_used,
        "curve": curve,
    }))
}

fn wam_side(
    features: &Option<PathBuf>,
    model: &Option<PathBuf>,
    k: Option<usize>,
    side: &str,
    cfg: &EmConfig,
    transform: Transform,
) -> Result<Gmm, CliError> {
    match (features, model) {
        (Some(path), None) => {
            let k = k.ok_or_else(|| CliError::usage(format!("--k or --k-{side} is required with --features-{side}")))?;
            let x = load_features(path)?;
            Ok(fit_gmm_transformed(&x, positive("--k", k)?, cfg, transform)?)
        }
        (None, Some(path)) => {
            let g = load_model(path)?;
            if g.meta().transform != transform {
                return Err(CliError::usage(format!(
                    "{}: model was fitted with transform {:?}, but {:?} was requested",
                    path.display(),
                    g.meta().transform,
                    transform
                )));
            }
            if let Some(k) = k {
                if k != g.k() {
                    return Err(CliError::usage(format!(
                        "{}: model has {} components, but k={k} was requested",
                        path.display(),
                        g.k()
                    )));
                }
            }
            Ok(g)
        }
        _ => Err(CliError::usage(format!("give exactly one of --features-{side} and --model-{side}"))),
    }
}

fn cmd_wam(a: &WamArgs, seed: u64) -> Result<Value, CliError> {
    a.transform.validate()?;
    let cfg = a.em.config(seed)?;
    let transform = a.transform.transform();
    let gmm_a = wam_side(&a.features_a, &a.model_a, a.k_a.or(a.k), "a", &cfg, transform)?;
    let gmm_b = wam_side(&a.features_b, &a.model_b, a.k_b.or(a.k), "b", &cfg, transform)?;
    let out = mw2_squared(&gmm_a, &gmm_b)?;
    Ok(json!({
        "metric": MetricName::Wam2,
        "value": out.value,
        "k_a": gmm_a.k(),
        "k_b": gmm_b.k(),
        "seed": seed,
        "transport_cost_check": out.plan.cost_under(&out.ground_cost),
    }))
}

fn cmd_fid(a: &FidArgs) -> Result<Value, CliError> {
    if a.log_transform && !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(CliError::usage("--epsilon must be positive"));
    }
    let cfg = FidConfig {
        denominator: match a.covariance {
            Denominator::Unbiased => CovarianceDenominator::Unbiased,
            Denominator::Ml => CovarianceDenominator::MaxLikelihood,
        },
        transform: if a.log_transform {
            Transform::log(a.epsilon)
        } else {
            Transform::none()
        },
    };
    let (x, y) = (load_features(&a.features_a)?, load_features(&a.features_b)?);
    Ok(serde_json::to_value(fid_with(&x, &y, &cfg)?)?)
}

fn cmd_kid(a: &KidArgs) -> Result<Value, CliError> {
    if a.block_size.is_some_and(|b| b < 2) {
        return Err(CliError::usage("--block-size must be at least 2"));
    }
    let (x, y) = (load_features(&a.features_a)?, load_features(&a.features_b)?);
    let cfg = KidConfig {
        block_size: a.block_size,
    };
    Ok(serde_json::to_value(kid_with(&x, &y, &cfg)?)?)
}

#[derive(Serialize)]
struct KsOutput {
    alpha: f64,
    n_marginals: usize,
    rejected: usize,
    fraction_rejected: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_marginal: Option<Vec<wam_core::normtest::KsResult>>,
}

fn cmd_ks(a: &KsArgs) -> Result<Value, CliError> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::usage("--alpha must be in (0, 1)"));
    }
    let rep = marginal_normality_report(&load_features(&a.features)?, a.alpha)?;
    let out = KsOutput {
        alpha: rep.alpha,
        n_marginals: rep.per_marginal.len(),
        rejected: rep.rejected(),
        fraction_rejected: rep.fraction_rejected,
        per_marginal: a.per_marginal.then(|| rep.per_marginal.clone()),
    };
    Ok(serde_json::to_value(out)?)
}

fn cmd_ratio(a: &RatioArgs) -> Result<Value, CliError> {
    Ok(serde_json::to_value(ratios_from_values(a.orig, a.pert, a.orig_other, a.pert_other)?)?)
}

fn human(v: &Value) -> String {
    match v {
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| format!("{k}: {}", if v.is_string() { v.as_str().unwrap().to_string() } else { v.to_string() }))
            .collect::<Vec<_>>()
            .join("\n"),
        other => other.to_string(),
    }
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    if let Some(n) = cli.threads {
        positive("--threads", n)?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli.seed),
        Command::ChooseK(a) => cmd_choose_k(a, cli.seed),
        Command::Wam(a) => cmd_wam(a, cli.seed),
        Command::Fid(a) => cmd_fid(a),
        Command::Kid(a) => cmd_kid(a),
        Command::Ks(a) => cmd_ks(a),
        Command::Ratio(a) => cmd_ratio(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            if cli.json {
                println!("{v}");
            } else {
                println!("{}", human(&v));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
