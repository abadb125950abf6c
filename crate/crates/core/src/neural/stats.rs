//! Per-sample learnable embeddings and empirical Gaussian statistics.

use super::{randn_init, ParamSet};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// One learnable embedding vector per training sample.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// Single `(n_samples, dim)` tensor named `embeddings`.
    pub params: ParamSet,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(n_samples: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        params.add("embeddings", randn_init(&mut rng, &[n_samples, dim], 0.5));
        EmbeddingTable { params, dim }
    }

    pub fn len(&self) -> usize {
        self.params.tensors[0].value.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.params.tensors[0]
            .value
            .slice(ndarray::s![i, ..])
            .iter()
            .copied()
            .collect()
    }
}

/// Mean and covariance of an empirical Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and covariance (denominator `n - 1`) of row vectors.
    /// With `shrink`, a multiple of the average diagonal is added until the
    /// smallest eigenvalue reaches `1e-8`.
    pub fn from_rows(rows: &[Vec<f64>], shrink: bool) -> Result<GaussianStats> {
        if rows.len() < 2 {
            return Err(Error::Data(format!(
                "need >= 2 samples for covariance, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("inconsistent sample dimensions".into()));
        }
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in rows {
            for (i, v) in r.iter().enumerate() {
                mean[i] += v / n;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c: DVector<f64> = DVector::from_iterator(d, r.iter().copied()) - &mean;
            cov.syger(1.0 / (n - 1.0), &c, &c, 1.0);
        }
        // syger fills the lower triangle; mirror it.
        for i in 0..d {
            for j in (i + 1)..d {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let mut stats = GaussianStats { mean, cov };
        if shrink {
            stats.shrink_to_min_eigenvalue(1e-8);
        }
        Ok(stats)
    }

    /// Adds `lambda * mean(diag) * I` with the smallest `lambda` that lifts
    /// the minimum eigenvalue to `floor`.
    pub fn shrink_to_min_eigenvalue(&mut self, floor: f64) {
        let d = self.cov.nrows();
        let eig = self.cov.clone().symmetric_eigenvalues();
        let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eig >= floor {
            return;
        }
        let diag_avg = self.cov.diagonal().mean();
        let bump = if diag_avg > 0.0 {
            // lambda * diag_avg lifts every eigenvalue by that amount.
            (floor - min_eig).max(0.0)
        } else {
            floor
        };
        for i in 0..d {
            self.cov[(i, i)] += bump;
        }
    }

    /// Draws from `N(mean, cov)` via Cholesky.
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
        let d = self.mean.len();
        let chol = nalgebra::Cholesky::new(self.cov.clone()).ok_or_else(|| {
            Error::Numerical("covariance not positive definite for sampling".into())
        })?;
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + chol.l() * z;
        Ok(x.iter().copied().collect())
    }
}

/// Empirical Gaussian of all sample embeddings, shrunk when rank-deficient.
pub fn empirical_embedding_stats(table: &EmbeddingTable) -> Result<GaussianStats> {
    let rows: Vec<Vec<f64>> = (0..table.len()).map(|i| table.row(i)).collect();
    GaussianStats::from_rows(&rows, true)
}
