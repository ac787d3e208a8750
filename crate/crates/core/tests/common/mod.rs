//! Independent reference implementations and samplers shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal, Uniform};

use wam_core::{FeatureMatrix, Gaussian, Gmm, SymMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- transport

/// Minimum transport cost by enumerating every vertex of the transportation
/// polytope: each vertex is supported on a spanning tree of the bipartite
/// row/column graph, whose flows are forced by peeling leaves.
pub fn ot_by_vertex_enumeration(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let size = m + n - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(size);
    enumerate_subsets(&cells, size, 0, &mut chosen, &mut |subset| {
        if let Some(flow) = tree_flows(subset, m, n, a, b) {
            if flow.iter().all(|&f| f >= -1e-12) {
                let c: f64 = subset.iter().zip(&flow).map(|(&(i, j), f)| f * cost[(i, j)]).sum();
                best = best.min(c);
            }
        }
    });
    best
}

fn enumerate_subsets<F: FnMut(&[(usize, usize)])>(
    cells: &[(usize, usize)],
    size: usize,
    start: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut F,
) {
    if chosen.len() == size {
        visit(chosen);
        return;
    }
    let remaining = size - chosen.len();
    for idx in start..=cells.len().saturating_sub(remaining) {
        chosen.push(cells[idx]);
        enumerate_subsets(cells, size, idx + 1, chosen, visit);
        chosen.pop();
    }
}

/// Flows on a spanning tree with the given marginals, or `None` if the
/// cells do not form a spanning tree.
fn tree_flows(cells: &[(usize, usize)], m: usize, n: usize, a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    // Nodes 0..m are rows, m..m+n are columns.
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(i, j) in cells {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, m + j));
        if ri == rj {
            return None;
        }
        parent[ri] = rj;
    }

    let mut supply: Vec<f64> = a.iter().copied().chain(b.iter().copied()).collect();
    let mut live = vec![true; cells.len()];
    let mut flow = vec![0.0; cells.len()];
    for _ in 0..cells.len() {
        let mut degree = vec![0usize; m + n];
        for (e, &(i, j)) in cells.iter().enumerate() {
            if live[e] {
                degree[i] += 1;
                degree[m + j] += 1;
            }
        }
        let (e, leaf) = cells
            .iter()
            .enumerate()
            .filter(|(e, _)| live[*e])
            .find_map(|(e, &(i, j))| {
                if degree[i] == 1 {
                    Some((e, i))
                } else if degree[m + j] == 1 {
                    Some((e, m + j))
                } else {
                    None
                }
            })?;
        let (i, j) = cells[e];
        let other = if leaf == i { m + j } else { i };
        flow[e] = supply[leaf];
        supply[other] -= supply[leaf];
        supply[leaf] = 0.0;
        live[e] = false;
    }
    Some(flow)
}

/// Random simplex point; with `allow_zero`, entries are sometimes zeroed.
pub fn random_weights(rng: &mut ChaCha8Rng, k: usize, allow_zero: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    if allow_zero && k > 1 {
        for v in w.iter_mut() {
            if rng.random_bool(0.15) {
                *v = 0.0;
            }
        }
        if w.iter().all(|&v| v == 0.0) {
            w[0] = 1.0;
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    // Pin the sum to exactly 1 up to the last ulp.
    let last = w.iter().rposition(|&v| v > 0.0).unwrap();
    let rest: f64 = w.iter().enumerate().filter(|&(i, _)| i != last).map(|(_, v)| v).sum();
    w[last] = 1.0 - rest;
    w
}

// ---------------------------------------------------------------- gaussians

/// `(μ₁ − μ₂)² + (σ₁ − σ₂)²`.
pub fn w2_1d(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    (mu1 - mu2).powi(2) + (s1 - s2).powi(2)
}

/// Random SPD matrix `A Aᵀ + δI` (or rank-deficient when `rank < d`).
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, rank: usize, scale: f64) -> SymMatrix {
    let a = DMatrix::from_fn(d, rank, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    let m = &a * a.transpose();
    SymMatrix::symmetrized(&m).unwrap()
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Gaussian {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    let mut cov = random_spd(rng, d, d, 1.0);
    cov.add_diagonal(0.1);
    Gaussian::new(mean, cov).unwrap()
}

pub fn random_gmm(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Gmm {
    let weights = random_weights(rng, k, false);
    let comps = (0..k).map(|_| random_gaussian(rng, d)).collect();
    Gmm::new(weights, comps, wam_core::gmm::FitRecord::unfitted()).unwrap()
}

/// Rows drawn from a mixture with random well-separated means.
pub fn mixture_sample(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> FeatureMatrix {
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-8.0..8.0)).collect())
        .collect();
    let scales: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..k);
        for &m in &centers[c] {
            data.push(m + scales[c] * rng.sample::<f64, _>(StandardNormal));
        }
    }
    FeatureMatrix::from_f64(n, d, data).unwrap()
}

/// Correlated Gaussian rows: `x = μ + L z` with random `L`.
pub fn gaussian_sample(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> FeatureMatrix {
    let l = DMatrix::from_fn(d, d, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 })
        + DMatrix::identity(d, d);
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &l * z;
        data.extend(x.iter().zip(&mu).map(|(v, m)| v + m));
    }
    FeatureMatrix::from_f64(n, d, data).unwrap()
}

// ---------------------------------------------------------------- likelihood

/// `ln Σₖ πₖ 𝒩(x; μₖ, Σₖ)` summed over rows, evaluated directly through the
/// density (no log-sum-exp) with an explicit inverse and determinant.
pub fn naive_log_likelihood(g: &Gmm, x: &FeatureMatrix) -> f64 {
    let d = g.dim() as f64;
    let parts: Vec<(f64, DVector<f64>, DMatrix<f64>, f64)> = g
        .weights()
        .iter()
        .zip(g.components())
        .map(|(&w, c)| {
            let cov = c.cov().as_matrix().clone();
            let det = cov.determinant();
            let inv = cov.try_inverse().unwrap();
            (w, c.mean().clone(), inv, det)
        })
        .collect();
    x.rows()
        .map(|row| {
            let xv = DVector::from_column_slice(row);
            let p: f64 = parts
                .iter()
                .map(|(w, mu, inv, det)| {
                    let diff = &xv - mu;
                    let q = (diff.transpose() * inv * &diff)[(0, 0)];
                    w * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d) * det).sqrt()
                })
                .sum();
            p.ln()
        })
        .sum()
}

// ---------------------------------------------------------------- kid

/// Unbiased MMD² with the cubic kernel, straight from the definition.
pub fn kid_brute_force(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    let d = a.n_cols() as f64;
    let k = |x: &[f64], y: &[f64]| {
        let mut dot = 0.0;
        for t in 0..x.len() {
            dot += x[t] * y[t];
        }
        (dot / d + 1.0).powi(3)
    };
    let (m, n) = (a.n_rows(), b.n_rows());
    let mut saa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                saa += k(a.row(i), a.row(j));
            }
        }
    }
    let mut sbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sbb += k(b.row(i), b.row(j));
            }
        }
    }
    let mut sab = 0.0;
    for i in 0..m {
        for j in 0..n {
            sab += k(a.row(i), b.row(j));
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    saa / (mf * (mf - 1.0)) + sbb / (nf * (nf - 1.0)) - 2.0 * sab / (mf * nf)
}

// ---------------------------------------------------------------- ks

/// Sup distance between the empirical CDF and `cdf`, evaluated at every
/// sample point from both sides by counting (no sorting).
pub fn ks_by_counting(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = values.len() as f64;
    let mut d: f64 = 0.0;
    for &x in values {
        let at_or_below = values.iter().filter(|&&v| v <= x).count() as f64 / n;
        let below = values.iter().filter(|&&v| v < x).count() as f64 / n;
        let f = cdf(x);
        d = d.max((at_or_below - f).abs()).max((f - below).abs());
    }
    d
}

/// `P(K > λ)` from the alternating series, summed to a fixed 200 terms.
pub fn kolmogorov_series(lambda: f64) -> f64 {
    let mut s = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        s += sign * (-2.0 * jf * jf * lambda * lambda).exp();
    }
    (2.0 * s).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------- knee

/// Kneedle for a convex decreasing curve, transcribed step by step:
/// normalize, flip y, take differences, locate local extrema, and declare a
/// knee when the difference curve drops below the last maximum's threshold.
/// Returns `None` when no knee is declared.
pub fn kneedle_reference(x: &[f64], y: &[f64], s: f64) -> Option<f64> {
    let norm = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|t| (t - lo) / (hi - lo)).collect::<Vec<f64>>()
    };
    let xn = norm(x);
    let yn = norm(y);
    let ymax = yn.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let yt: Vec<f64> = yn.iter().map(|v| ymax - v).collect();
    let yd: Vec<f64> = yt.iter().zip(&xn).map(|(a, b)| a - b).collect();
    let len = yd.len();

    let get = |i: i64| yd[i.clamp(0, len as i64 - 1) as usize];
    let maxima: Vec<usize> = (0..len)
        .filter(|&i| get(i as i64) >= get(i as i64 - 1) && get(i as i64) >= get(i as i64 + 1))
        .collect();
    let minima: Vec<usize> = (0..len)
        .filter(|&i| get(i as i64) <= get(i as i64 - 1) && get(i as i64) <= get(i as i64 + 1))
        .collect();
    let dx_mean = xn.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (len - 1) as f64;
    let tmx: Vec<f64> = maxima.iter().map(|&i| yd[i] - s * dx_mean.abs()).collect();

    let first = *maxima.first()?;
    let mut max_iter = 0;
    let mut threshold = 0.0;
    let mut threshold_index = 0;
    for i in 0..len {
        if i < first {
            continue;
        }
        let j = i + 1;
        if i == len - 1 {
            break;
        }
        if maxima.contains(&i) {
            threshold = tmx[max_iter];
            threshold_index = i;
            max_iter += 1;
        }
        if minima.contains(&i) {
            threshold = 0.0;
        }
        if yd[j] < threshold {
            return Some(x[threshold_index]);
        }
    }
    None
}

// ---------------------------------------------------------------- moment-matched 1D family

/// The five zero-mean, variance-100 distributions used by the FID blind-spot check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentMatched {
    Gaussian,
    SkewedMixture,
    Uniform,
    SymmetricMixture,
    Laplace,
}

impl MomentMatched {
    pub const ALL: [MomentMatched; 5] = [
        MomentMatched::Gaussian,
        MomentMatched::SkewedMixture,
        MomentMatched::Uniform,
        MomentMatched::SymmetricMixture,
        MomentMatched::Laplace,
    ];

    /// `(weight, mean, sd)` for the mixture members of this family.
    pub fn skewed_components() -> [(f64, f64, f64); 2] {
        let r5 = 5f64.sqrt();
        [(0.2, -8.0 * r5, 2.0 * 10f64.sqrt()), (0.8, 2.0 * r5, 15f64.sqrt())]
    }

    pub fn sample(self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        match self {
            MomentMatched::Gaussian => (0..n).map(|_| 10.0 * std_normal.sample(rng)).collect(),
            MomentMatched::SkewedMixture => {
                let [(w0, m0, s0), (_, m1, s1)] = Self::skewed_components();
                (0..n)
                    .map(|_| {
                        let z: f64 = std_normal.sample(rng);
                        if rng.random_bool(w0) {
                            m0 + s0 * z
                        } else {
                            m1 + s1 * z
                        }
                    })
                    .collect()
            }
            MomentMatched::Uniform => {
                let h = 10.0 * 3f64.sqrt();
                let u = Uniform::new(-h, h).unwrap();
                (0..n).map(|_| u.sample(rng)).collect()
            }
            MomentMatched::SymmetricMixture => {
                let (m, s) = (4.0 * 5f64.sqrt(), 2.0 * 5f64.sqrt());
                (0..n)
                    .map(|_| {
                        let z: f64 = std_normal.sample(rng);
                        if rng.random_bool(0.5) {
                            -m + s * z
                        } else {
                            m + s * z
                        }
                    })
                    .collect()
            }
            MomentMatched::Laplace => {
                let b = 5.0 * 2f64.sqrt();
                let e = Exp::new(1.0).unwrap();
                (0..n)
                    .map(|_| {
                        let v: f64 = e.sample(rng);
                        if rng.random_bool(0.5) {
                            b * v
                        } else {
                            -b * v
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Mixture transport between `𝒩(0, 100)` and the skewed mixture, from the
/// 1D closed form per component pair (one source component, so the plan is forced).
pub fn gaussian_vs_skewed_closed_form() -> f64 {
    MomentMatched::skewed_components()
        .iter()
        .map(|&(w, m, s)| w * w2_1d(0.0, 10.0, m, s))
        .sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
