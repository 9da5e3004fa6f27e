//! Token embedding table constrained to the sqrt(D) sphere, denoiser
//! synthesis, and the nearest-neighbor-distance collapse metric.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::mat::Mat;
use crate::num;
use crate::rng::Rng;

/// Tolerance for declaring a probability row stochastic.
const ROW_SUM_TOL: f64 = 1e-6;

/// V×D token embedding matrix; every row has Euclidean norm sqrt(D).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: Mat,
}

impl EmbeddingTable {
    /// Wraps an existing matrix, projecting rows onto the sphere.
    pub fn new(rows: Mat) -> CoreResult<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(CoreError::InvalidInput(
                "embedding table needs V >= 1 and D >= 1".into(),
            ));
        }
        let mut table = EmbeddingTable { rows };
        table.project_rows()?;
        Ok(table)
    }

    /// Standard-normal rows projected onto the sphere.
    pub fn init_random(vocab: usize, dim: usize, rng: &mut Rng) -> CoreResult<Self> {
        EmbeddingTable::new(rng.normal_mat(vocab, dim))
    }

    /// Wraps rows that already satisfy the sphere invariant bit-for-bit;
    /// used when restoring serialized tables, where reprojection would
    /// perturb the stored values.
    pub fn from_projected(rows: Mat) -> CoreResult<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(CoreError::InvalidInput(
                "embedding table needs V >= 1 and D >= 1".into(),
            ));
        }
        let target = num::sqrt(rows.cols() as f64);
        for r in 0..rows.rows() {
            let norm = num::sqrt(rows.row(r).iter().map(|&x| x * x).sum());
            if num::abs(norm - target) > 1e-9 {
                return Err(CoreError::DegenerateEmbedding(format!(
                    "row {r} has norm {norm}, expected {target}"
                )));
            }
        }
        Ok(EmbeddingTable { rows })
    }

    pub fn vocab(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    /// Mutable access for the optimizer; callers must re-project afterwards.
    pub fn rows_mut(&mut self) -> &mut Mat {
        &mut self.rows
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.rows.row(token)
    }

    /// Rescales each row to norm sqrt(D), preserving direction. Idempotent.
    pub fn project_rows(&mut self) -> CoreResult<()> {
        let target = num::sqrt(self.dim() as f64);
        for r in 0..self.vocab() {
            let row = self.rows.row_mut(r);
            let norm = num::sqrt(row.iter().map(|&x| x * x).sum());
            if norm == 0.0 || !norm.is_finite() {
                return Err(CoreError::DegenerateEmbedding(format!(
                    "row {r} has norm {norm}; cannot project onto the sphere"
                )));
            }
            let s = target / norm;
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        Ok(())
    }

    /// Looks up rows for a token sequence, producing an L×D matrix.
    pub fn embed(&self, tokens: &[usize]) -> CoreResult<Mat> {
        let mut out = Mat::zeros(tokens.len(), self.dim());
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab() {
                return Err(CoreError::InvalidInput(format!(
                    "token id {t} out of range for vocab {}",
                    self.vocab()
                )));
            }
            out.row_mut(i).copy_from_slice(self.rows.row(t));
        }
        Ok(out)
    }

    /// Embedding expectation `z_hat = E^T x_hat` per row of a row-stochastic
    /// L×V probability matrix.
    pub fn synthesize_denoised(&self, probs: &Mat) -> CoreResult<Mat> {
        if probs.cols() != self.vocab() {
            return Err(CoreError::InvalidInput(format!(
                "probs have {} columns, vocab is {}",
                probs.cols(),
                self.vocab()
            )));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 {
                    return Err(CoreError::InvalidInput(format!(
                        "probs row {r} has negative entry {p}"
                    )));
                }
                sum += p;
            }
            if num::abs(sum - 1.0) > ROW_SUM_TOL {
                return Err(CoreError::InvalidInput(format!(
                    "probs row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(probs.matmul(&self.rows))
    }

    /// Geodesic angle to the nearest other row, for every row.
    ///
    /// Angles are measured on the normalized sphere, so the sqrt(D) radius
    /// drops out: `angle = arccos(e_k . e_j / D)`.
    pub fn nnd_distribution(&self) -> CoreResult<Vec<f64>> {
        let v = self.vocab();
        if v < 2 {
            return Err(CoreError::InvalidInput(
                "nearest-neighbor distances need at least two rows".into(),
            ));
        }
        let d = self.dim() as f64;
        let mut out = Vec::with_capacity(v);
        for k in 0..v {
            let mut best = f64::INFINITY;
            for j in 0..v {
                if j == k {
                    continue;
                }
                let mut dot = 0.0;
                for (&a, &b) in self.rows.row(k).iter().zip(self.rows.row(j)) {
                    dot += a * b;
                }
                let angle = num::acos((dot / d).clamp(-1.0, 1.0));
                if angle < best {
                    best = angle;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Nearest-row decoder: argmin over rows of squared distance, ties to
    /// the lowest token id.
    pub fn nearest_rows(&self, z: &Mat) -> CoreResult<Vec<usize>> {
        if z.cols() != self.dim() {
            return Err(CoreError::InvalidInput(format!(
                "decode expects width {}, got {}",
                self.dim(),
                z.cols()
            )));
        }
        let mut out = Vec::with_capacity(z.rows());
        for i in 0..z.rows() {
            let target = z.row(i);
            let mut best = (0usize, f64::INFINITY);
            for k in 0..self.vocab() {
                let mut dist = 0.0;
                for (&a, &b) in target.iter().zip(self.rows.row(k)) {
                    let diff = a - b;
                    dist += diff * diff;
                }
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            out.push(best.0);
        }
        Ok(out)
    }
}
