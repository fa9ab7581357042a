//! Weighted particle populations: effective sample size, empirical moments,
//! and systematic resampling.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalized_weights};

/// A population of N weighted field configurations. States are stored as a
/// flat row-major N×V matrix; log-weights are unnormalized (−∞ marks a dead
/// particle). The cloud owns the generator used for population-level draws
/// (initialization and resampling).
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    states: Vec<f64>,
    log_weights: Vec<f64>,
    dim: usize,
    pub rng: ChaCha8Rng,
}

impl ParticleCloud {
    pub fn new(states: Vec<f64>, log_weights: Vec<f64>, dim: usize, rng: ChaCha8Rng) -> Self {
        assert!(dim > 0, "state dimension must be positive");
        assert_eq!(states.len() % dim, 0, "state buffer is not a whole matrix");
        assert_eq!(states.len() / dim, log_weights.len());
        assert!(log_weights.len() >= 2, "a cloud needs at least 2 particles");
        ParticleCloud {
            states,
            log_weights,
            dim,
            rng,
        }
    }

    /// Draw an N×V cloud i.i.d. from the standard normal reference with
    /// uniform weights.
    pub fn standard_normal(n: usize, dim: usize, mut rng: ChaCha8Rng) -> Self {
        let dist = rand_distr::StandardNormal;
        let states: Vec<f64> = (0..n * dim).map(|_| rng.sample::<f64, _>(dist)).collect();
        ParticleCloud::new(states, vec![0.0; n], dim, rng)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [f64] {
        &mut self.states
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    pub fn set_uniform_weights(&mut self) {
        self.log_weights.fill(0.0);
    }

    /// Per-particle rows as an iterator of slices.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Effective sample size of a weight vector.
#[derive(Debug, Clone, Copy)]
pub struct EssStat {
    pub ess: f64,
    pub ess_fraction: f64,
}

/// ESS = (Σ w)² / Σ w² on normalized weights, computed stably by subtracting
/// the maximum log-weight before exponentiation (uniform weights give exactly
/// N).
pub fn effective_sample_size(log_weights: &[f64]) -> EssStat {
    let n = log_weights.len();
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return EssStat {
            ess: 0.0,
            ess_fraction: 0.0,
        };
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &w in log_weights {
        let e = (w - max).exp();
        sum += e;
        sum_sq += e * e;
    }
    let ess = sum * sum / sum_sq;
    EssStat {
        ess,
        ess_fraction: ess / n as f64,
    }
}

/// Weighted mean and covariance of a cloud.
#[derive(Debug, Clone)]
pub struct CloudMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the weighted scatter carried no information (all effective
    /// particles identical) and the covariance is jitter only.
    pub degenerate: bool,
    /// The diagonal jitter that was added.
    pub jitter: f64,
}

/// Weighted mean and covariance with symmetrization and a trace-scaled
/// diagonal jitter (δ = 10⁻⁶ · trace/V) guaranteeing positive definiteness.
///
/// The covariance accumulation is the heavy reduction of a tempering step; it
/// runs over fixed particle blocks folded in index order, so results do not
/// depend on thread count.
pub fn empirical_mean_cov(cloud: &ParticleCloud) -> CloudMoments {
    use rayon::prelude::*;

    let n = cloud.len();
    let v = cloud.dim();
    let weights = normalized_weights(cloud.log_weights());

    let mut mean = vec![0.0; v];
    for (i, row) in cloud.rows().enumerate() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for (m, x) in mean.iter_mut().zip(row) {
            *m += w * x;
        }
    }

    // Block-parallel scatter accumulation with a fixed block count.
    const BLOCKS: usize = 16;
    let block_len = n.div_ceil(BLOCKS);
    let partials: Vec<DMatrix<f64>> = (0..BLOCKS)
        .into_par_iter()
        .map(|b| {
            let lo = b * block_len;
            let hi = ((b + 1) * block_len).min(n);
            let mut acc = DMatrix::zeros(v, v);
            let mut centered = vec![0.0; v];
            for i in lo..hi {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                for (c, (x, m)) in centered.iter_mut().zip(cloud.state(i).iter().zip(&mean)) {
                    *c = x - m;
                }
                for r in 0..v {
                    let wr = w * centered[r];
                    for c in 0..=r {
                        acc[(r, c)] += wr * centered[c];
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = DMatrix::zeros(v, v);
    for p in &partials {
        cov += p;
    }
    for r in 0..v {
        for c in 0..r {
            cov[(c, r)] = cov[(r, c)];
        }
    }

    // Symmetrize (already symmetric by construction, kept for clarity of the
    // contract) and jitter.
    let trace: f64 = (0..v).map(|i| cov[(i, i)]).sum();
    let degenerate = !(trace > 0.0) || !trace.is_finite();
    let jitter = if degenerate {
        1e-6
    } else {
        1e-6 * trace / v as f64
    };
    if degenerate {
        cov.fill(0.0);
    }
    for i in 0..v {
        cov[(i, i)] += jitter;
    }
    CloudMoments {
        mean,
        cov,
        degenerate,
        jitter,
    }
}

/// Systematic resampling of `n_out` indices from unnormalized log-weights
/// using a single uniform draw. Offspring counts differ from n_out·wᵢ by less
/// than 1.
pub fn systematic_indices(
    log_weights: &[f64],
    n_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = log_weights.len();
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY || n == 0 {
        return Err(Error::PopulationDeath);
    }
    let weights = normalized_weights(log_weights);
    let u: f64 = rng.gen::<f64>();
    let mut indices = Vec::with_capacity(n_out);
    let mut cumulative = weights[0];
    let mut j = 0usize;
    for i in 0..n_out {
        let position = (i as f64 + u) / n_out as f64;
        while position >= cumulative && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        indices.push(j);
    }
    Ok(indices)
}

/// Systematic resampling of a cloud back to its own size; the output weights
/// are uniform (zero).
pub fn resample_systematic(cloud: &ParticleCloud, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    systematic_indices(cloud.log_weights(), cloud.len(), rng)
}

/// Apply a resampling index set, producing a fresh equally-weighted cloud.
pub fn apply_resample(cloud: &ParticleCloud, indices: &[usize]) -> ParticleCloud {
    let v = cloud.dim();
    let mut states = Vec::with_capacity(indices.len() * v);
    for &i in indices {
        states.extend_from_slice(cloud.state(i));
    }
    ParticleCloud::new(
        states,
        vec![0.0; indices.len()],
        v,
        cloud.rng.clone(),
    )
}
