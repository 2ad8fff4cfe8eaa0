use serde::{Deserialize, Serialize};

use super::ModelError;

/// `K` evenly spaced, half-overlapping triangular popularity buckets on
/// `[0, 1]`: centers `k / (K - 1)`, half-width `1 / (K - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketLayout {
    k: usize,
}

impl BucketLayout {
    pub fn new(k: usize) -> Result<Self, ModelError> {
        if k < 2 {
            return Err(ModelError::InvalidConfig(format!("need at least 2 buckets, got {k}")));
        }
        Ok(Self { k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn half_width(&self) -> f64 {
        1.0 / (self.k - 1) as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        k as f64 / (self.k - 1) as f64
    }

    /// `(start, end)` of bucket `k` (0-based).
    pub fn bounds(&self, k: usize) -> (f64, f64) {
        let c = self.center(k);
        let d = self.half_width();
        (c - d, c + d)
    }

    /// Triangular weights before normalization:
    /// `max(0, min(n - start, end - n) / (end - start))`.
    pub fn raw_weights(&self, n: f64) -> Result<Vec<f64>, ModelError> {
        if !(0.0..=1.0).contains(&n) {
            return Err(ModelError::PopularityOutOfRange(n));
        }
        Ok((0..self.k)
            .map(|k| {
                let (start, end) = self.bounds(k);
                ((n - start).min(end - n) / (end - start)).max(0.0)
            })
            .collect())
    }

    /// Weights renormalized to sum to one; at most two are non-zero.
    pub fn weights(&self, n: f64) -> Result<Vec<f64>, ModelError> {
        let mut w = self.raw_weights(n)?;
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        Ok(w)
    }
}
