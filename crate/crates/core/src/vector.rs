//! Dense-vector primitives shared by the scoring, learning and bank code.
//!
//! All arithmetic is `f64`. [`Embedding`] values are unit-norm by
//! construction, so cosine similarity between two embeddings reduces to a
//! dot product in the hot loops.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtlError};

/// Tolerance on the Euclidean norm of a normalized embedding.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// A unit-norm feature vector for one image or one text prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length.
    ///
    /// Fails on an empty, zero or non-finite vector.
    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(TtlError::Domain("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TtlError::Domain("non-finite vector component".into()));
        }
        let n = norm(&values);
        if n == 0.0 || !n.is_finite() {
            return Err(TtlError::Domain("degenerate vector".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::normalize(values.iter().map(|&v| f64::from(v)).collect())
    }

    /// Wraps values that the caller guarantees are already unit-norm.
    pub(crate) fn from_unit_unchecked(values: Vec<f64>) -> Self {
        debug_assert!((norm(&values) - 1.0).abs() < UNIT_NORM_TOL);
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity with another embedding (both unit-norm).
    #[inline]
    pub fn cos(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two arbitrary (not necessarily normalized) vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TtlError::Argument(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(TtlError::Domain("degenerate vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
