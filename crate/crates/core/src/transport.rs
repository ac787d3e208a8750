//! Exact discrete optimal transport and the mixture distance built on it.
//!
//! [`solve_discrete_ot`] is a transportation simplex: a northwest-corner
//! starting basis, `u + v = c` potentials on the basis tree, and Bland's
//! lowest-index rule for both the entering and leaving cell. Mixture sizes
//! are small (K ≤ 50), so an exact solve is cheap.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::w2_squared;
use crate::gmm::Gmm;

/// Marginals must sum to 1 within this.
pub const MARGINAL_TOL: f64 = 1e-9;

/// A coupling between two discrete distributions and its cost.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// `K₀ × K₁` mass matrix; rows sum to the source weights, columns to the target weights.
    pub matrix: DMatrix<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.row_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.matrix.column_iter().map(|c| c.sum()).collect()
    }

    /// `Σᵢⱼ γᵢⱼ cᵢⱼ` recomputed from the plan.
    pub fn cost_under(&self, cost: &DMatrix<f64>) -> f64 {
        self.matrix.component_mul(cost).sum()
    }
}

fn check_marginal(side: &'static str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidInput(format!("{side} marginal is empty")));
    }
    if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "{side} marginal has invalid entry {v}"
        )));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_TOL {
        return Err(Error::InvalidMarginals { side, sum });
    }
    Ok(())
}

/// Minimizes `Σ γᵢⱼ cᵢⱼ` over couplings of `a` and `b`.
///
/// Zero-weight entries are removed before solving and come back as zero
/// rows or columns of the plan. The optimal cost is unique; which optimal
/// plan is returned depends on the pivot sequence.
pub fn solve_discrete_ot(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    check_marginal("source", a)?;
    check_marginal("target", b)?;
    if cost.nrows() != a.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: cost.nrows(),
        });
    }
    if cost.ncols() != b.len() {
        return Err(Error::DimMismatch {
            expected: b.len(),
            got: cost.ncols(),
        });
    }
    if let Some(c) = cost.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "transport costs must be finite and nonnegative, found {c}"
        )));
    }

    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let sub_cost = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])]);
    let sub_a: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let sub_b: Vec<f64> = cols.iter().map(|&j| b[j]).collect();

    let sub_plan = Simplex::new(&sub_cost, &sub_a, &sub_b).solve()?;

    let mut matrix = DMatrix::zeros(a.len(), b.len());
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            matrix[(i, j)] = sub_plan[(si, sj)];
        }
    }
    let cost_value = matrix.component_mul(cost).sum();
    Ok(TransportPlan {
        matrix,
        cost: cost_value,
    })
}

/// Transportation simplex over strictly positive marginals.
struct Simplex<'a> {
    cost: &'a DMatrix<f64>,
    m: usize,
    n: usize,
    flow: DMatrix<f64>,
    basic: Vec<bool>,
    /// Basic cells as flat indices `i * n + j`; always `m + n − 1` of them.
    basis: Vec<usize>,
}

impl<'a> Simplex<'a> {
    fn new(cost: &'a DMatrix<f64>, a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        let mut flow = DMatrix::zeros(m, n);
        let mut basic = vec![false; m * n];
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut supply = a.to_vec();
        let mut demand = b.to_vec();

        // Northwest corner. Advancing exactly one index per step yields a
        // spanning tree of m + n − 1 cells even when a step is degenerate.
        let (mut i, mut j) = (0, 0);
        loop {
            let q = supply[i].min(demand[j]);
            flow[(i, j)] = q;
            basic[i * n + j] = true;
            basis.push(i * n + j);
            let row_done = q == supply[i];
            supply[i] -= q;
            demand[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || row_done {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(basis.len(), m + n - 1);
        Self {
            cost,
            m,
            n,
            flow,
            basic,
            basis,
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        // Nodes: rows 0..m, columns m..m+n. Edge payload is the cell index.
        let mut adj = vec![Vec::new(); self.m + self.n];
        for &cell in &self.basis {
            let (i, j) = (cell / self.n, cell % self.n);
            adj[i].push((self.m + j, cell));
            adj[self.m + j].push((i, cell));
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, cell) in &adj[node] {
                if pot[next].is_nan() {
                    let c = self.cost[(cell / self.n, cell % self.n)];
                    pot[next] = c - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Basic cells on the tree path from column node `j` to row node `i`,
    /// in walk order starting at the column.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.m + self.n;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut queue = VecDeque::from([i]);
        let target = self.m + j;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, cell) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, cell));
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let (prev, cell) = parent[node].expect("basis is a spanning tree");
            cells.push(cell);
            node = prev;
        }
        cells
    }

    fn solve(mut self) -> Result<DMatrix<f64>> {
        let scale = self.cost.iter().copied().fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        let limit = 1000 + 50 * (self.m + self.n) * (self.m + self.n) * (self.m * self.n);

        for _ in 0..limit {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);

            let entering = (0..self.m * self.n).find(|&cell| {
                let (i, j) = (cell / self.n, cell % self.n);
                !self.basic[cell] && self.cost[(i, j)] - u[i] - v[j] < -tol
            });
            let Some(enter) = entering else {
                return Ok(self.flow);
            };
            let (ei, ej) = (enter / self.n, enter % self.n);

            // Cycle: entering cell gains, then path cells alternate lose/gain.
            let path = self.path(&adj, ei, ej);
            let losing: Vec<usize> = path.iter().copied().step_by(2).collect();
            let theta = losing
                .iter()
                .map(|&c| self.flow[(c / self.n, c % self.n)])
                .fold(f64::INFINITY, f64::min);
            let leave = losing
                .iter()
                .copied()
                .filter(|&c| self.flow[(c / self.n, c % self.n)] == theta)
                .min()
                .expect("cycle has a losing cell");

            for (pos, &c) in path.iter().enumerate() {
                let cell = (c / self.n, c % self.n);
                if pos % 2 == 0 {
                    self.flow[cell] -= theta;
                } else {
                    self.flow[cell] += theta;
                }
            }
            self.flow[(ei, ej)] = theta;
            self.flow[(leave / self.n, leave % self.n)] = 0.0;

            self.basic[leave] = false;
            self.basic[enter] = true;
            let slot = self
                .basis
                .iter()
                .position(|&c| c == leave)
                .expect("leaving cell is basic");
            self.basis[slot] = enter;
        }
        Err(Error::Numerical(
            "transportation simplex hit its pivot limit".into(),
        ))
    }
}

/// Result of [`mw2_squared`].
#[derive(Clone, Debug)]
pub struct Mw2 {
    /// Squared mixture Wasserstein distance.
    pub value: f64,
    pub plan: TransportPlan,
    /// `W₂²` between every pair of components.
    pub ground_cost: DMatrix<f64>,
}

impl Mw2 {
    /// Un-squared distance.
    pub fn distance(&self) -> f64 {
        self.value.sqrt()
    }
}

/// Pairwise `W₂²` between the components of `p` (rows) and `q` (columns).
pub fn ground_cost(p: &Gmm, q: &Gmm) -> Result<DMatrix<f64>> {
    if p.dim() != q.dim() {
        return Err(Error::DimMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let (k0, k1) = (p.k(), q.k());
    let values: Vec<f64> = (0..k0 * k1)
        .into_par_iter()
        .map(|idx| w2_squared(&p.components()[idx / k1], &q.components()[idx % k1]))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_row_slice(k0, k1, &values))
}

/// Squared Wasserstein distance restricted to Gaussian-mixture couplings:
/// optimal transport between the weight vectors with `W₂²` ground costs.
pub fn mw2_squared(p: &Gmm, q: &Gmm) -> Result<Mw2> {
    let ground_cost = ground_cost(p, q)?;
    let plan = solve_discrete_ot(&ground_cost, p.weights(), q.weights())?;
    Ok(Mw2 {
        value: plan.cost.max(0.0),
        plan,
        ground_cost,
    })
}
