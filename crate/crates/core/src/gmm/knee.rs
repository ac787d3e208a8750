//! Knee selection on a decreasing, convex AIC curve (kneedle).

use rayon::prelude::*;

use super::{aic, fit_gmm, EmConfig};
use crate::error::{Error, Result};
use crate::featstore::FeatureMatrix;

pub const DEFAULT_SENSITIVITY: f64 = 0.5;
pub const DEFAULT_SKIP_PREFIX: usize = 2;

/// Difference-curve values this close to zero are treated as exactly zero,
/// so roundoff on a straight line cannot fake a local extremum.
const FLAT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KneeSelection {
    pub k: usize,
    /// No difference-curve maximum crossed its threshold; `k` is the
    /// interior maximum of the difference curve instead.
    pub fallback_used: bool,
}

/// Fits one mixture per grid value and scores it with AIC on the same data.
pub fn aic_curve(x: &FeatureMatrix, ks: &[usize], cfg: &EmConfig) -> Result<Vec<(usize, f64)>> {
    ks.par_iter()
        .map(|&k| {
            let g = fit_gmm(x, k, cfg)?;
            Ok((k, aic(&g, x)?))
        })
        .collect()
}

/// Picks the knee of an AIC curve.
///
/// The first `skip_prefix` points are dropped. Both axes are min-max
/// normalized, the curve is flipped to increasing-concave form and the
/// difference curve `y − x` is scanned: a local maximum becomes the knee once
/// a later point falls below `max − sensitivity · mean Δx` before the next
/// local maximum resets the threshold (a local minimum lowers it to zero).
pub fn select_k(curve: &[(usize, f64)], sensitivity: f64, skip_prefix: usize) -> Result<KneeSelection> {
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidInput("k values must be strictly increasing".into()));
    }
    if curve.iter().any(|(_, y)| !y.is_finite()) {
        return Err(Error::InvalidInput("AIC curve has non-finite values".into()));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidInput("sensitivity must be nonnegative".into()));
    }
    let pts = curve.get(skip_prefix..).unwrap_or(&[]);
    if pts.len() < 3 {
        return Err(Error::InsufficientCurve { usable: pts.len() });
    }

    let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let xn = min_max(&xs);
    let yn = min_max(&ys);
    let diff: Vec<f64> = yn
        .iter()
        .zip(&xn)
        .map(|(y, x)| {
            let d = (1.0 - y) - x;
            if d.abs() < FLAT_EPS {
                0.0
            } else {
                d
            }
        })
        .collect();

    let n = diff.len();
    let at = |i: isize| diff[i.clamp(0, n as isize - 1) as usize];
    let is_max = |i: usize| at(i as isize) >= at(i as isize - 1) && at(i as isize) >= at(i as isize + 1);
    let is_min = |i: usize| at(i as isize) <= at(i as isize - 1) && at(i as isize) <= at(i as isize + 1);

    let step = (xn[n - 1] - xn[0]) / (n - 1) as f64;
    let first_max = (0..n).find(|&i| is_max(i));

    if let Some(start) = first_max {
        let mut threshold = f64::NEG_INFINITY;
        let mut threshold_index = start;
        for i in start..n - 1 {
            if is_max(i) {
                threshold = diff[i] - sensitivity * step.abs();
                threshold_index = i;
            }
            if is_min(i) {
                threshold = 0.0;
            }
            if diff[i + 1] < threshold {
                return Ok(KneeSelection {
                    k: pts[threshold_index].0,
                    fallback_used: false,
                });
            }
        }
    }

    let best = (1..n - 1)
        .fold(1, |best, i| if diff[i] > diff[best] { i } else { best });
    Ok(KneeSelection {
        k: pts[best].0,
        fallback_used: true,
    })
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        v.iter().map(|x| (x - lo) / span).collect()
    } else {
        vec![0.0; v.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sharp_knee() -> Vec<(usize, f64)> {
        (1..=30)
            .map(|k| {
                let y = if k <= 10 {
                    10_000.0 - 100.0 * k as f64
                } else {
                    9_000.0 - (k as f64 - 10.0)
                };
                (k, y)
            })
            .collect()
    }

    #[test]
    fn sharp_knee_is_found() {
        for skip in [0, 2] {
            let sel = select_k(&sharp_knee(), 0.5, skip).unwrap();
            assert_eq!(sel, KneeSelection { k: 10, fallback_used: false });
        }
    }

    #[test]
    fn straight_line_falls_back() {
        let line: Vec<(usize, f64)> = (1..=20).map(|k| (k, 500.0 - 7.0 * k as f64)).collect();
        let sel = select_k(&line, 0.5, 0).unwrap();
        assert!(sel.fallback_used);
        assert!(sel.k > 1 && sel.k < 20);
    }

    #[test]
    fn too_few_points() {
        let c = vec![(1, 3.0), (2, 2.0), (3, 1.0)];
        assert!(matches!(select_k(&c, 0.5, 1), Err(Error::InsufficientCurve { usable: 2 })));
        assert!(select_k(&c, 0.5, 0).is_ok());
        assert!(matches!(select_k(&c, 0.5, 5), Err(Error::InsufficientCurve { usable: 0 })));
    }

    #[test]
    fn rejects_unordered_grid() {
        let c = vec![(1, 3.0), (3, 2.0), (2, 1.0)];
        assert!(matches!(select_k(&c, 0.5, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sparse_grid_reports_grid_value() {
        let c: Vec<(usize, f64)> = [1usize, 5, 10, 15, 20, 30, 40, 50]
            .iter()
            .map(|&k| (k, 1000.0 / k as f64))
            .collect();
        let sel = select_k(&c, 0.5, 0).unwrap();
        assert!(c.iter().any(|p| p.0 == sel.k));
    }
}
