//! Symmetric positive-semidefinite matrix primitives.
//!
//! Everything here works in `f64`. Square roots go through a full symmetric
//! eigendecomposition; small negative eigenvalues produced by roundoff are
//! clamped to zero, anything below `-1e-8 * max(1, λ_max)` is rejected.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance for clamping negative eigenvalues.
pub const CLAMP_RTOL: f64 = 1e-8;

/// A dense symmetric matrix.
///
/// The lower triangle is canonical: constructors mirror it into the upper
/// triangle so `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds from a square matrix, keeping its lower triangle.
    pub fn from_lower(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("matrix has dimension 0".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let mut inner = m;
        mirror_lower(&mut inner);
        Ok(Self { inner })
    }

    /// Builds `(m + mᵀ) / 2`.
    pub fn symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (m + m.transpose()) * 0.5;
        Self::from_lower(sym)
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be at least 1");
        Self {
            inner: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be at least 1");
        Self {
            inner: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::from_lower(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    /// Reads a row-major packed lower triangle: `(0,0), (1,0), (1,1), (2,0), ...`.
    pub fn from_packed_lower(dim: usize, packed: &[f64]) -> Result<Self> {
        let expected = dim * (dim + 1) / 2;
        if packed.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: packed.len(),
            });
        }
        let mut m = DMatrix::zeros(dim, dim);
        let mut idx = 0;
        for i in 0..dim {
            for j in 0..=i {
                m[(i, j)] = packed[idx];
                idx += 1;
            }
        }
        Self::from_lower(m)
    }

    /// Row-major packed lower triangle, the inverse of [`SymMatrix::from_packed_lower`].
    pub fn to_packed_lower(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim() {
            self.inner[(i, i)] += value;
        }
    }
}

fn mirror_lower(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored column-wise, matching `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigendecomp(a: &SymMatrix) -> Result<Eigen> {
    if a.inner.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(a.inner.clone());
    let d = a.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigendecomposition did not converge".into()));
    }
    Ok(Eigen { values, vectors })
}

/// Clamp tolerance for a spectrum with largest eigenvalue `lambda_max`.
pub fn clamp_tolerance(lambda_max: f64) -> f64 {
    CLAMP_RTOL * lambda_max.max(1.0)
}

/// Clamps roundoff-sized negative eigenvalues to zero in place.
fn clamp_spectrum(values: &mut DVector<f64>) -> Result<()> {
    let lambda_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = clamp_tolerance(lambda_max);
    for v in values.iter_mut() {
        if *v < -tol {
            return Err(Error::NotPositiveSemidefinite {
                eigenvalue: *v,
                tolerance: tol,
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Eigenvalues of a PSD matrix after clamping, descending.
pub fn psd_eigenvalues(a: &SymMatrix) -> Result<DVector<f64>> {
    let mut values = sym_eigendecomp(a)?.values;
    clamp_spectrum(&mut values)?;
    Ok(values)
}

/// The unique symmetric PSD square root.
pub fn psd_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let Eigen {
        mut values,
        vectors,
    } = sym_eigendecomp(a)?;
    clamp_spectrum(&mut values)?;
    let mut scaled = vectors.clone();
    for (j, lambda) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(lambda.sqrt());
    }
    SymMatrix::symmetrized(&(scaled * vectors.transpose()))
}

/// `tr((s1^{1/2} s2 s1^{1/2})^{1/2})`.
pub fn trace_sqrt_product(s1: &SymMatrix, s2: &SymMatrix) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimMismatch {
            expected: s1.dim(),
            got: s2.dim(),
        });
    }
    let root = psd_sqrt(s1)?;
    let inner = &root.inner * &s2.inner * &root.inner;
    let inner = SymMatrix::symmetrized(&inner)?;
    let values = psd_eigenvalues(&inner)?;
    Ok(values.iter().map(|v| v.sqrt()).sum())
}
