//! Dense covariance handling: jittered Cholesky factors, triangular products,
//! and multivariate-normal densities. The factorization is delegated to
//! nalgebra; the per-proposal triangular multiply is hand-rolled because it
//! sits on the sampler hot path.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a proposal covariance.
#[derive(Debug, Clone)]
pub struct CholFactor {
    dim: usize,
    /// Row-major lower triangle, full dim x dim storage.
    l: Vec<f64>,
    log_det_cov: f64,
}

impl CholFactor {
    /// Identity factor (unit covariance).
    pub fn identity(dim: usize) -> Self {
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            l[i * dim + i] = 1.0;
        }
        CholFactor {
            dim,
            l,
            log_det_cov: 0.0,
        }
    }

    /// Factor a symmetric covariance, escalating the diagonal jitter until the
    /// factorization succeeds. `base_jitter` is added unconditionally.
    pub fn from_covariance(cov: &DMatrix<f64>, base_jitter: f64) -> Result<Self> {
        let dim = cov.nrows();
        assert_eq!(dim, cov.ncols(), "covariance must be square");
        let mut jitter = base_jitter.max(0.0);
        // Scale-aware floor used only if escalation is needed.
        let scale = cov.diagonal().amax().max(1e-300);
        for _ in 0..60 {
            let mut work = cov.clone();
            for i in 0..dim {
                work[(i, i)] += jitter;
            }
            if let Some(chol) = work.cholesky() {
                let lm = chol.l();
                let mut l = vec![0.0; dim * dim];
                let mut log_det = 0.0;
                for i in 0..dim {
                    for j in 0..=i {
                        l[i * dim + j] = lm[(i, j)];
                    }
                    log_det += lm[(i, i)].ln();
                }
                return Ok(CholFactor {
                    dim,
                    l,
                    log_det_cov: 2.0 * log_det,
                });
            }
            jitter = if jitter > 0.0 {
                jitter * 10.0
            } else {
                1e-12 * scale
            };
        }
        Err(Error::CovarianceFactorization)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det of the covariance (twice the log det of the factor).
    pub fn log_det_cov(&self) -> f64 {
        self.log_det_cov
    }

    /// `out = L z` (half the flops of a dense multiply).
    pub fn tri_mul(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        debug_assert_eq!(z.len(), d);
        debug_assert_eq!(out.len(), d);
        for i in 0..d {
            let row = &self.l[i * d..i * d + i + 1];
            let mut acc = 0.0;
            for (lij, zj) in row.iter().zip(&z[..=i]) {
                acc += lij * zj;
            }
            out[i] = acc;
        }
    }

    /// Solve `L y = x` by forward substitution.
    pub fn forward_solve(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.l[i * d..i * d + i];
            let mut acc = x[i];
            for (lij, yj) in row.iter().zip(&y[..i]) {
                acc -= lij * yj;
            }
            y[i] = acc / self.l[i * d + i];
        }
    }

    /// Log-density of N(mean, L Lᵀ) at `x`.
    pub fn mvn_log_density(&self, mean: &[f64], x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let d = self.dim;
        scratch.clear();
        scratch.extend(x.iter().zip(mean).map(|(xi, mi)| xi - mi));
        let mut y = vec![0.0; d];
        self.forward_solve(scratch, &mut y);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * quad - 0.5 * self.log_det_cov - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}
