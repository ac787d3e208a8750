//! Feature matrices and the two on-disk formats.
//!
//! # FMX1 (binary feature matrix)
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field                             |
//! |--------|------|-----------------------------------|
//! | 0      | 4    | magic `FMX1`                      |
//! | 4      | 1    | dtype: 0 = f32, 1 = f64           |
//! | 5      | 8    | n_rows (u64)                      |
//! | 13     | 8    | n_cols (u64)                      |
//! | 21     | ...  | row-major payload, IEEE 754       |
//!
//! # gmm-v1 (JSON mixture model)
//!
//! ```text
//! {"format":"gmm-v1","dim":D,"k":K,"weights":[..K],"means":[[..D]; K],
//!  "covariances_lower":[[..D(D+1)/2]; K],
//!  "transform":{"log":bool,"epsilon":f},
//!  "fit":{"seed":u64,"iterations":n,"loglik":f}}
//! ```
//!
//! Covariances are stored as row-major lower triangles. Floats are written
//! in shortest round-trip form, so a write/read cycle is lossless.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::gmm::{FitRecord, Gmm, Transform};
use crate::linalg::{psd_eigenvalues, SymMatrix};

pub const FMX1_MAGIC: [u8; 4] = *b"FMX1";
const HEADER_LEN: u64 = 4 + 1 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// `n_rows × n_cols` matrix of image features, row-major.
///
/// Values are held as `f64`; `dtype` records the storage precision used on
/// disk. An `F32` matrix only ever holds values exactly representable in
/// `f32`, so serialization is lossless either way.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
    dtype: DType,
    pub source_tag: String,
}

impl FeatureMatrix {
    pub fn from_f64(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::checked(n_rows, n_cols, data, DType::F64)
    }

    pub fn from_f32(n_rows: usize, n_cols: usize, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(f64::from).collect();
        Self::checked(n_rows, n_cols, data, DType::F32)
    }

    /// Builds from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(Error::DimMismatch {
                expected: n_cols,
                got: rows[bad].len(),
            });
        }
        Self::from_f64(rows.len(), n_cols, rows.concat())
    }

    /// Single-column matrix.
    pub fn from_column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::from_f64(n, 1, values)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            data.extend(row.iter());
        }
        Self::from_f64(m.nrows(), m.ncols(), data)
    }

    fn checked(n_rows: usize, n_cols: usize, data: Vec<f64>, dtype: DType) -> Result<Self> {
        let expected = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Error::InvalidInput("matrix shape overflows".into()))?;
        if data.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at index {idx}"
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
            dtype,
            source_tag: String::new(),
        })
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let width = self.n_cols.max(1);
        self.data.chunks_exact(width).take(self.n_rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.n_cols, &self.data)
    }

    pub fn row_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_row_slice(self.row(i))
    }

    /// Elementwise map producing an `F64` matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        let mut out = Self::checked(self.n_rows, self.n_cols, data, DType::F64)?;
        out.source_tag = self.source_tag.clone();
        Ok(out)
    }

    /// Rows in `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.n_rows);
        Self {
            n_rows: end - start,
            n_cols: self.n_cols,
            data: self.data[start * self.n_cols..end * self.n_cols].to_vec(),
            dtype: self.dtype,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Counts bytes so I/O errors can report where they happened.
struct Offset<T> {
    inner: T,
    pos: u64,
}

impl<T: Write> Offset<T> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.pos,
            source,
        })?;
        self.pos += bytes.len() as u64;
        Ok(())
    }
}

impl<T: Read> Offset<T> {
    /// Fills `buf`; a short read becomes `Truncated { expected: total, .. }`.
    fn take(&mut self, buf: &mut [u8], total: u64) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        expected: total,
                        got: self.pos + filled as u64,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(Error::Io {
                        offset: self.pos + filled as u64,
                        source,
                    })
                }
            }
        }
        self.pos += buf.len() as u64;
        Ok(())
    }
}

pub fn write_features<W: Write>(m: &FeatureMatrix, sink: W) -> Result<()> {
    let mut out = Offset { inner: sink, pos: 0 };
    out.put(&FMX1_MAGIC)?;
    out.put(&[m.dtype.code()])?;
    out.put(&(m.n_rows as u64).to_le_bytes())?;
    out.put(&(m.n_cols as u64).to_le_bytes())?;

    const CHUNK: usize = 8192;
    let mut buf = Vec::with_capacity(CHUNK * 8);
    for chunk in m.data.chunks(CHUNK) {
        buf.clear();
        match m.dtype {
            DType::F32 => {
                for &v in chunk {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.put(&buf)?;
    }
    out.inner.flush().map_err(|source| Error::Io {
        offset: out.pos,
        source,
    })
}

pub fn read_features<R: Read>(source: R) -> Result<FeatureMatrix> {
    let mut input = Offset {
        inner: source,
        pos: 0,
    };
    let mut magic = [0u8; 4];
    input.take(&mut magic, HEADER_LEN)?;
    if magic != FMX1_MAGIC {
        return Err(Error::UnknownFormat(magic));
    }
    let mut header = [0u8; 17];
    input.take(&mut header, HEADER_LEN)?;
    let dtype = DType::from_code(header[0])
        .ok_or_else(|| Error::InvalidInput(format!("unknown dtype code {}", header[0])))?;
    let n_rows = u64::from_le_bytes(header[1..9].try_into().unwrap());
    let n_cols = u64::from_le_bytes(header[9..17].try_into().unwrap());

    let count = n_rows
        .checked_mul(n_cols)
        .ok_or_else(|| Error::InvalidInput("header shape overflows".into()))?;
    let payload = count
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| Error::InvalidInput("header shape overflows".into()))?;
    let total = HEADER_LEN + payload;

    let count = usize::try_from(count)
        .map_err(|_| Error::InvalidInput("matrix too large for this platform".into()))?;
    let mut data = Vec::with_capacity(count.min(1 << 24));
    const CHUNK: usize = 8192;
    let mut buf = vec![0u8; CHUNK * dtype.width()];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let bytes = &mut buf[..n * dtype.width()];
        input.take(bytes, total)?;
        match dtype {
            DType::F32 => data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))),
            ),
            DType::F64 => data.extend(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
            ),
        }
        remaining -= n;
    }

    FeatureMatrix::checked(n_rows as usize, n_cols as usize, data, dtype)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    dim: usize,
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances_lower: Vec<Vec<f64>>,
    transform: TransformDoc,
    fit: FitDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformDoc {
    log: bool,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitDoc {
    seed: u64,
    iterations: usize,
    loglik: f64,
}

pub const MODEL_FORMAT: &str = "gmm-v1";

/// Renders the canonical gmm-v1 document (pretty-printed, schema key order, trailing newline).
pub fn model_to_string(g: &Gmm) -> Result<String> {
    let doc = ModelDoc {
        format: MODEL_FORMAT.to_string(),
        dim: g.dim(),
        k: g.k(),
        weights: g.weights().to_vec(),
        means: g
            .components()
            .iter()
            .map(|c| c.mean().iter().copied().collect())
            .collect(),
        covariances_lower: g
            .components()
            .iter()
            .map(|c| c.cov().to_packed_lower())
            .collect(),
        transform: TransformDoc {
            log: g.meta().transform.log,
            epsilon: g.meta().transform.epsilon,
        },
        fit: FitDoc {
            seed: g.meta().seed,
            iterations: g.meta().iterations,
            loglik: g.meta().loglik,
        },
    };
    let mut s = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::InvalidModel(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_model<W: Write>(g: &Gmm, sink: W) -> Result<()> {
    let text = model_to_string(g)?;
    let mut out = Offset { inner: sink, pos: 0 };
    out.put(text.as_bytes())?;
    out.inner.flush().map_err(|source| Error::Io {
        offset: out.pos,
        source,
    })
}

pub fn read_model<R: Read>(mut source: R) -> Result<Gmm> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|source| Error::Io { offset: 0, source })?;
    model_from_str(&text)
}

pub fn model_from_str(text: &str) -> Result<Gmm> {
    let doc: ModelDoc =
        serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::InvalidModel(format!(
            "field `format`: expected \"{MODEL_FORMAT}\", got {:?}",
            doc.format
        )));
    }
    if doc.dim == 0 {
        return Err(Error::InvalidModel("field `dim`: must be at least 1".into()));
    }
    if doc.k == 0 {
        return Err(Error::InvalidModel("field `k`: must be at least 1".into()));
    }
    let len_check = |field: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!(
                "field `{field}`: expected length {want}, got {got}"
            )))
        }
    };
    len_check("weights", doc.weights.len(), doc.k)?;
    len_check("means", doc.means.len(), doc.k)?;
    len_check("covariances_lower", doc.covariances_lower.len(), doc.k)?;

    if let Some(w) = doc.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidModel(format!(
            "field `weights`: entry {w} is not a nonnegative number"
        )));
    }
    let sum: f64 = doc.weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidModel(format!(
            "field `weights`: sum is {sum}, expected 1"
        )));
    }
    let mut weights = doc.weights;
    if (sum - 1.0).abs() > 1e-9 {
        weights.iter_mut().for_each(|w| *w /= sum);
    }

    let tri = doc.dim * (doc.dim + 1) / 2;
    let mut components = Vec::with_capacity(doc.k);
    for (i, (mean, lower)) in doc.means.iter().zip(&doc.covariances_lower).enumerate() {
        len_check(&format!("means[{i}]"), mean.len(), doc.dim)?;
        len_check(&format!("covariances_lower[{i}]"), lower.len(), tri)?;
        let cov = SymMatrix::from_packed_lower(doc.dim, lower)
            .map_err(|e| Error::InvalidModel(format!("field `covariances_lower[{i}]`: {e}")))?;
        psd_eigenvalues(&cov)
            .map_err(|e| Error::InvalidModel(format!("field `covariances_lower[{i}]`: {e}")))?;
        let mean = DVector::from_row_slice(mean);
        let g = Gaussian::new(mean, cov)
            .map_err(|e| Error::InvalidModel(format!("component {i}: {e}")))?;
        components.push(g);
    }

    if !(doc.transform.epsilon.is_finite() && doc.transform.epsilon >= 0.0) {
        return Err(Error::InvalidModel(
            "field `transform.epsilon`: must be a nonnegative number".into(),
        ));
    }
    let meta = FitRecord {
        seed: doc.fit.seed,
        iterations: doc.fit.iterations,
        loglik: doc.fit.loglik,
        converged: true,
        loglik_history: Vec::new(),
        transform: Transform {
            log: doc.transform.log,
            epsilon: doc.transform.epsilon,
        },
    };
    Gmm::new(weights, components, meta).map_err(|e| Error::InvalidModel(e.to_string()))
}
