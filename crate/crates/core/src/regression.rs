//! Least-squares conditional expectations on polynomial features of a scalar state.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Paths per reduction chunk; fixed so that sums do not depend on the thread count.
pub const CHUNK: usize = 4096;

/// Polynomial basis `1, x, ..., x^degree` of the standardized state.
#[derive(Debug, Clone)]
pub struct Fit {
    mean: f64,
    scale: f64,
    dim: usize,
    gram_inv: DMatrix<f64>,
    condition: f64,
    n: usize,
}

impl Fit {
    /// Builds the design for `x`. When `strict` is false an ill-conditioned
    /// design falls back to lower degrees; otherwise it is an error.
    pub fn new(x: &[f64], degree: usize, max_condition: f64, strict: bool, step: usize) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::InvalidParameter("regression on an empty sample".into()));
        }
        let mean = chunked_sum(x, |v| v) / n as f64;
        let var = chunked_sum(x, |v| (v - mean).powi(2)) / n as f64;
        let sd = var.sqrt();
        let degenerate = !(sd > 1e-12 * (1.0 + mean.abs()));
        let scale = if degenerate { 1.0 } else { sd };
        let mut degree = if degenerate { 0 } else { degree };
        loop {
            let dim = degree + 1;
            let mut fit = Self {
                mean,
                scale,
                dim,
                gram_inv: DMatrix::identity(dim, dim),
                condition: 1.0,
                n,
            };
            let gram = fit.gram(x);
            let eig = SymmetricEigen::new(gram.clone());
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            let condition = if min > 0.0 { max / min } else { f64::INFINITY };
            if condition <= max_condition {
                let chol = gram.cholesky().ok_or(Error::RankDeficient { step, condition })?;
                fit.gram_inv = chol.inverse();
                fit.condition = condition;
                return Ok(fit);
            }
            if strict || degree == 0 {
                return Err(Error::RankDeficient { step, condition });
            }
            log::debug!("step {step}: condition {condition:.3e} at degree {degree}, lowering");
            degree -= 1;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn features(&self, x: f64, out: &mut [f64]) {
        let s = (x - self.mean) / self.scale;
        let mut p = 1.0;
        for o in out.iter_mut().take(self.dim) {
            *o = p;
            p *= s;
        }
    }

    fn gram(&self, x: &[f64]) -> DMatrix<f64> {
        let dim = self.dim;
        let acc = chunked_reduce(x.len(), dim * dim, |range, acc| {
            let mut phi = vec![0.0; dim];
            for &xv in &x[range] {
                self.features(xv, &mut phi);
                for a in 0..dim {
                    for b in a..dim {
                        acc[a * dim + b] += phi[a] * phi[b];
                    }
                }
            }
        });
        let mut g = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for b in a..dim {
                let v = acc[a * dim + b] / self.n as f64;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    /// Coefficients of the projection of `target` on the basis.
    pub fn project(&self, x: &[f64], target: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let b = chunked_reduce(x.len(), dim, |range, acc| {
            let mut phi = vec![0.0; dim];
            for i in range {
                self.features(x[i], &mut phi);
                for a in 0..dim {
                    acc[a] += phi[a] * target[i];
                }
            }
        });
        self.solve(&b)
    }

    /// Projection of a target that vanishes outside the listed `(index, value)` entries.
    pub fn project_sparse(&self, x: &[f64], entries: impl Iterator<Item = (usize, f64)>) -> Vec<f64> {
        let dim = self.dim;
        let mut b = vec![0.0; dim];
        let mut phi = vec![0.0; dim];
        for (i, v) in entries {
            self.features(x[i], &mut phi);
            for a in 0..dim {
                b[a] += phi[a] * v;
            }
        }
        self.solve(&b)
    }

    fn solve(&self, sums: &[f64]) -> Vec<f64> {
        let b = DVector::from_iterator(self.dim, sums.iter().map(|s| s / self.n as f64));
        (&self.gram_inv * b).iter().cloned().collect()
    }

    #[inline]
    pub fn predict(&self, coef: &[f64], x: f64) -> f64 {
        let s = (x - self.mean) / self.scale;
        let mut p = 1.0;
        let mut acc = 0.0;
        for c in coef {
            acc += c * p;
            p *= s;
        }
        acc
    }

    /// Heteroskedasticity-robust (HC0) covariance of the coefficients, row-major.
    pub fn hc0_cov(&self, x: &[f64], resid: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let meat = chunked_reduce(x.len(), dim * dim, |range, acc| {
            let mut phi = vec![0.0; dim];
            for i in range {
                self.features(x[i], &mut phi);
                let r2 = resid[i] * resid[i];
                for a in 0..dim {
                    for b in 0..dim {
                        acc[a * dim + b] += phi[a] * phi[b] * r2;
                    }
                }
            }
        });
        let n = self.n as f64;
        let meat = DMatrix::from_row_slice(dim, dim, &meat) / (n * n);
        let cov = &self.gram_inv * meat * &self.gram_inv;
        let mut out = vec![0.0; dim * dim];
        for a in 0..dim {
            for b in 0..dim {
                out[a * dim + b] = cov[(a, b)];
            }
        }
        out
    }

    /// Standard error of the fitted value at `x` given a coefficient covariance.
    pub fn prediction_se(&self, cov: &[f64], x: f64) -> f64 {
        let mut phi = vec![0.0; self.dim];
        self.features(x, &mut phi);
        let mut v = 0.0;
        for a in 0..self.dim {
            for b in 0..self.dim {
                v += phi[a] * cov[a * self.dim + b] * phi[b];
            }
        }
        v.max(0.0).sqrt()
    }
}

/// Sum of `f(x_i)` accumulated in fixed-size chunks.
pub fn chunked_sum<F: Fn(f64) -> f64 + Sync>(x: &[f64], f: F) -> f64 {
    let parts: Vec<f64> = x.par_chunks(CHUNK).map(|c| c.iter().map(|&v| f(v)).sum()).collect();
    parts.iter().sum()
}

/// Deterministic parallel reduction of `width` accumulators over `0..n`.
pub fn chunked_reduce<F>(n: usize, width: usize, body: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            body(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cubic_exactly() {
        let x: Vec<f64> = (0..1000).map(|i| -2.0 + 4.0 * i as f64 / 999.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let fit = Fit::new(&x, 3, 1e10, true, 0).unwrap();
        let coef = fit.project(&x, &y);
        for &v in &[-1.5, 0.0, 0.7, 1.9] {
            assert!((fit.predict(&coef, v) - (1.0 - 2.0 * v + 0.5 * v * v * v)).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_state_uses_constant() {
        let x = vec![0.0; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let fit = Fit::new(&x, 3, 1e10, true, 0).unwrap();
        assert_eq!(fit.dim(), 1);
        let coef = fit.project(&x, &y);
        assert!((coef[0] - 24.5).abs() < 1e-12);
    }

    #[test]
    fn two_point_state_lowers_degree() {
        let x: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        assert!(Fit::new(&x, 3, 1e10, true, 4).is_err());
        let fit = Fit::new(&x, 3, 1e10, false, 4).unwrap();
        assert_eq!(fit.dim(), 2);
    }

    #[test]
    fn sparse_projection_matches_dense() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut t = vec![0.0; 200];
        t[3] = 2.0;
        t[50] = -1.0;
        t[199] = 0.5;
        let fit = Fit::new(&x, 2, 1e10, true, 0).unwrap();
        let dense = fit.project(&x, &t);
        let sparse = fit.project_sparse(&x, [(3, 2.0), (50, -1.0), (199, 0.5)].into_iter());
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
