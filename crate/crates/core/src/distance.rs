//! Distance and similarity kernels shared by both clustering algorithms.
//!
//! Sums are accumulated in `f64` in ascending component order, which makes
//! `squared_distance(x, y)` and `squared_distance(y, x)` bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    /// l2-normalize both inputs before measuring. Off by default: token
    /// embeddings are clustered as they come out of the encoder.
    pub pre_normalize: bool,
}

impl Metric {
    pub const fn squared_euclidean() -> Self {
        Self {
            kind: MetricKind::SquaredEuclidean,
            pre_normalize: false,
        }
    }

    pub const fn normalized() -> Self {
        Self {
            kind: MetricKind::SquaredEuclidean,
            pre_normalize: true,
        }
    }
}

pub fn squared_distance(x: &[f64], y: &[f64], metric: Metric) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if !metric.pre_normalize {
        return Ok(sq_dist(x, y));
    }
    let (nx, ny) = (norm(x), norm(y));
    let sx = if nx > 0.0 { nx.recip() } else { 0.0 };
    let sy = if ny > 0.0 { ny.recip() } else { 0.0 };
    let mut acc = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let diff = a * sx - b * sy;
        acc += diff * diff;
    }
    Ok(acc)
}

/// `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn gaussian_similarity(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let d2 = squared_distance(x, y, Metric::squared_euclidean())?;
    Ok(gaussian_kernel(d2, sigma))
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSigma(sigma))
    }
}

#[inline]
pub(crate) fn gaussian_kernel(squared_distance: f64, sigma: f64) -> f64 {
    (-squared_distance / (2.0 * sigma * sigma)).exp()
}

/// Unchecked kernel for hot loops; callers guarantee equal lengths.
#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let diff = a - b;
        acc += diff * diff;
    }
    acc
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
