//! Dense-vector primitives: the matrix container, cosine similarity,
//! temperature-scaled softmax and L2 normalization.
//!
//! Values are stored as `f32`; every reduction (dot products, norms, sums)
//! accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Row-major dense matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ConfigInvalid("matrix dimension must be >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::dim(rows * dim, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Matrix { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be >= 1");
        Matrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dim(dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.dim == other.dim
    }

    pub(crate) fn check_shape(&self, other: &Matrix) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::dim(self.dim, other.dim));
        }
        if self.rows != other.rows {
            return Err(Error::dim(self.rows, other.rows));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>();
        Matrix::new(self.rows, self.dim, data)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>();
        Matrix::new(self.rows, self.dim, data)
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Stacks matrices of equal dimension vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let dim = match parts.first() {
            Some(m) => m.dim,
            None => return Err(Error::ConfigInvalid("nothing to stack".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.dim != dim {
                return Err(Error::dim(dim, m.dim));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, dim, data })
    }

    /// Returns a copy with every row scaled to unit norm.
    pub fn normalized_rows(&self) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.iter_rows() {
            data.extend(l2_normalize(r)?);
        }
        Matrix::new(self.rows, self.dim, data)
    }
}

/// Softmax temperature (tau > 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    /// Conventional CLIP temperature.
    pub const CLIP: Temperature = Temperature(0.01);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Temperature(tau))
        } else {
            Err(Error::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::CLIP
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Euclidean norm accumulated in `f64`.
pub fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

pub(crate) fn checked_norm(a: &[f32]) -> Result<f64> {
    let n = norm64(a);
    if n > DEGENERATE_NORM {
        Ok(n)
    } else {
        Err(Error::DegenerateVector)
    }
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Cosine given precomputed norms. Shares its arithmetic with [`cosine_sim`]
/// so cached-norm paths are bit-identical to the direct one.
#[inline]
pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    dot64(a, b) / (na * nb)
}

/// `exp(s_i / tau) / sum_j exp(s_j / tau)`, computed with max subtraction.
///
/// Panics on an empty score slice.
pub fn softmax_scaled(scores: &[f64], tau: Temperature) -> Vec<f64> {
    assert!(!scores.is_empty(), "softmax over an empty score vector");
    let t = tau.value();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| ((s - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln softmax(scores / tau)[target]`, stable for very small tau.
pub(crate) fn neg_log_softmax(scores: &[f64], tau: Temperature, target: usize) -> f64 {
    let t = tau.value();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = scores
        .iter()
        .map(|&s| ((s - max) / t).exp())
        .sum::<f64>()
        .ln();
    lse - (scores[target] - max) / t
}

/// Scales `a` to unit Euclidean norm.
pub fn l2_normalize(a: &[f32]) -> Result<Vec<f32>> {
    let n = checked_norm(a)?;
    Ok(a.iter().map(|&x| (x as f64 / n) as f32).collect())
}
