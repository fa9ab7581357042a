//! Nested sampling with batched deletion and constrained slice rejuvenation.
//!
//! The prior is the standard-normal reference N(0, I_V) and the likelihood is
//! exp(−S_E), so the posterior matches the SMC target at β = 1 and the
//! accumulated evidence is the same log(Z₁/Z₀) ratio. Each iteration deletes
//! the lowest-likelihood fraction of the live set, assigns every deleted
//! point its own deterministic prior-volume estimate, and refills the set by
//! cloning survivors and evolving them with hard-constraint slice steps that
//! respect both the likelihood threshold and a prior slice level (so the walk
//! targets the prior restricted to the constraint).

use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{systematic_indices, ParticleCloud};
use crate::error::{Error, Result};
use crate::kernels::{slice_step_constrained, tune_from_cloud, CloudTuned, KernelKind};
use crate::lattice::{LatticeSpec, Precision};
use crate::math::{log_add_exp, log_sum_exp};
use crate::metrics::SampleSet;
use crate::rng::{derive, stage};

/// Nested-sampling configuration. `n_mcmc_per_step = None` defaults to 3·V
/// slice steps per replacement.
#[derive(Debug, Clone)]
pub struct NsConfig {
    pub n_live: usize,
    pub delete_fraction: f64,
    pub n_mcmc_per_step: Option<usize>,
    pub termination_frac: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl NsConfig {
    pub fn new(seed: u64) -> Self {
        NsConfig {
            n_live: 5000,
            delete_fraction: 0.5,
            n_mcmc_per_step: None,
            termination_frac: 1e-3,
            precision: Precision::Single,
            seed,
        }
    }

    pub fn effective_n_mcmc(&self, volume: usize) -> usize {
        self.n_mcmc_per_step.unwrap_or(3 * volume)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delete_fraction > 0.0 && self.delete_fraction < 1.0) {
            return Err(Error::Config(format!(
                "delete_fraction must lie in (0, 1), got {}",
                self.delete_fraction
            )));
        }
        let k = (self.n_live as f64 * self.delete_fraction).ceil() as usize;
        if k < 1 || k >= self.n_live {
            return Err(Error::Config(
                "n_live · delete_fraction must leave at least one survivor and one deletion".into(),
            ));
        }
        if !(self.termination_frac > 0.0 && self.termination_frac < 1.0) {
            return Err(Error::Config("termination_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Output of a nested-sampling run. Dead points are stored in deletion order
/// (log-likelihoods non-decreasing, prior volumes strictly decreasing);
/// posterior weights are normalized and cover dead points followed by the
/// final live set.
#[derive(Debug, Clone)]
pub struct NsRunRecord {
    pub dim: usize,
    pub dead_states: Vec<f64>,
    pub dead_log_likelihood: Vec<f64>,
    pub dead_log_volume: Vec<f64>,
    pub log_z: f64,
    pub final_live: ParticleCloud,
    pub final_live_log_likelihood: Vec<f64>,
    pub posterior_log_weights: Vec<f64>,
    pub threshold_trace: Vec<f64>,
    pub iterations: usize,
    pub n_likelihood_evals: u64,
    pub wall_time: f64,
}

impl NsRunRecord {
    pub fn n_dead(&self) -> usize {
        self.dead_log_likelihood.len()
    }

    pub fn dead_state(&self, i: usize) -> &[f64] {
        &self.dead_states[i * self.dim..(i + 1) * self.dim]
    }
}

pub(crate) trait NsLikelihood: Sync {
    fn log_likelihood(&self, x: &[f64]) -> f64;
}

struct ActionLikelihood {
    spec: LatticeSpec,
    precision: Precision,
}

impl NsLikelihood for ActionLikelihood {
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        match self.precision {
            Precision::Double => -crate::lattice::action(&self.spec, x),
            Precision::Single => -crate::lattice::action_f32(&self.spec, x),
        }
    }
}

/// Run nested sampling on the φ⁴ target: prior N(0, I), likelihood exp(−S_E).
pub fn run_ns(spec: &LatticeSpec, cfg: &NsConfig) -> Result<NsRunRecord> {
    let likelihood = ActionLikelihood {
        spec: *spec,
        precision: cfg.precision,
    };
    run_ns_impl(&likelihood, spec.volume(), cfg)
}

fn log_prior(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|p| p * p).sum::<f64>()
}

pub(crate) fn run_ns_impl<L: NsLikelihood>(
    likelihood: &L,
    dim: usize,
    cfg: &NsConfig,
) -> Result<NsRunRecord> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let n = cfg.n_live;
    let k = (n as f64 * cfg.delete_fraction).ceil() as usize;
    let n_mcmc = cfg.effective_n_mcmc(dim);

    let mut live = ParticleCloud::standard_normal(n, dim, derive(cfg.seed, &[stage::INIT]));
    let mut live_logl: Vec<f64> = live
        .states()
        .par_chunks(dim)
        .map(|row| likelihood.log_likelihood(row))
        .collect();
    let mut n_evals = n as u64;

    let mut dead_states: Vec<f64> = Vec::new();
    let mut dead_logl: Vec<f64> = Vec::new();
    let mut dead_logx: Vec<f64> = Vec::new();
    let mut dead_log_weight: Vec<f64> = Vec::new();
    let mut threshold_trace = Vec::new();

    let mut log_x = 0.0f64; // log prior volume remaining
    let mut log_z_dead = f64::NEG_INFINITY;
    let mut prev_logl: Option<f64> = None;
    let mut iteration = 0usize;

    const MAX_ITERATIONS: usize = 1_000_000;
    loop {
        iteration += 1;
        if iteration > MAX_ITERATIONS {
            return Err(Error::Config(
                "nested sampling failed to terminate within the iteration cap".into(),
            ));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| live_logl[a].partial_cmp(&live_logl[b]).unwrap());
        let threshold = live_logl[order[k - 1]];
        threshold_trace.push(threshold);

        // Record deleted points with per-point volume estimates: within the
        // batch the j-th deletion (1-based, ascending likelihood) sits at
        // log X + log(1 − j/n).
        for (j, &idx) in order[..k].iter().enumerate() {
            let rank = (j + 1) as f64;
            let log_x_point = log_x + (1.0 - rank / n as f64).ln();
            let log_x_prev = if j == 0 {
                log_x
            } else {
                log_x + (1.0 - j as f64 / n as f64).ln()
            };
            let log_dx = log_x_prev + (-((log_x_point - log_x_prev).exp())).ln_1p();
            let logl = live_logl[idx];
            // Trapezoid in likelihood over the volume sliver; the first dead
            // point has no lower edge and contributes a rectangle.
            let log_contrib = match prev_logl {
                Some(prev) => log_add_exp(logl, prev) - std::f64::consts::LN_2 + log_dx,
                None => logl + log_dx,
            };
            log_z_dead = log_add_exp(log_z_dead, log_contrib);
            dead_states.extend_from_slice(live.state(idx));
            dead_logl.push(logl);
            dead_logx.push(log_x_point);
            dead_log_weight.push(log_contrib);
            prev_logl = Some(logl);
        }
        log_x += (1.0 - k as f64 / n as f64).ln();

        // Survivor cloud tunes the slice directions.
        let survivors: Vec<usize> = order[k..].to_vec();
        let mut survivor_states = Vec::with_capacity(survivors.len() * dim);
        for &idx in &survivors {
            survivor_states.extend_from_slice(live.state(idx));
        }
        let survivor_cloud = ParticleCloud::new(
            survivor_states,
            vec![0.0; survivors.len()],
            dim,
            live.rng.clone(),
        );
        let CloudTuned::Slice(slice_cfg) = tune_from_cloud(&survivor_cloud, KernelKind::Slice)?
        else {
            unreachable!()
        };

        // Replace the deleted block: clone survivors, evolve with constrained
        // slice steps that also slice the Gaussian prior.
        let seed = cfg.seed;
        let iter_u64 = iteration as u64;
        let replacements: Vec<(Vec<f64>, f64, u64, bool)> = (0..k)
            .into_par_iter()
            .map(|slot| {
                let mut rng = derive(seed, &[stage::SPAWN, iter_u64, slot as u64]);
                let pick = rng.gen_range(0..survivors.len());
                let mut state = survivor_cloud.state(pick).to_vec();
                let mut logl = live_logl[survivors[pick]];
                let mut evals = 0u64;
                let mut moved = false;
                for _ in 0..n_mcmc {
                    let prior_level = log_prior(&state) + rng.gen::<f64>().ln();
                    // Likelihood bound is non-strict so tied levels (flat
                    // likelihood plateaus) still admit prior moves; the prior
                    // slice height carries the strict comparison.
                    let membership = |x: &[f64]| {
                        if likelihood.log_likelihood(x) >= threshold {
                            log_prior(x) - prior_level
                        } else {
                            f64::NEG_INFINITY
                        }
                    };
                    let r = slice_step_constrained(membership, 0.0, &slice_cfg, &mut state, &mut rng);
                    evals += r.n_evals as u64;
                    if r.accepted {
                        moved = true;
                    }
                }
                if moved {
                    logl = likelihood.log_likelihood(&state);
                    evals += 1;
                }
                (state, logl, evals, moved)
            })
            .collect();
        let any_moved = replacements.iter().any(|(_, _, _, moved)| *moved);
        if !any_moved {
            return Err(Error::RejuvenationStall { iteration });
        }
        for (slot, (state, logl, evals, _)) in replacements.into_iter().enumerate() {
            let idx = order[slot];
            debug_assert!(logl >= threshold);
            live.states_mut()[idx * dim..(idx + 1) * dim].copy_from_slice(&state);
            live_logl[idx] = logl;
            n_evals += evals;
        }

        // Remaining-evidence termination.
        let max_live = live_logl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max_live + log_x < cfg.termination_frac.ln() + log_z_dead {
            break;
        }
    }

    // Final live-point contribution: remaining volume spread evenly.
    let live_term = log_x + log_sum_exp(&live_logl) - (n as f64).ln();
    let log_z = log_add_exp(log_z_dead, live_term);

    let mut posterior_log_weights = Vec::with_capacity(dead_logl.len() + n);
    posterior_log_weights.extend(dead_log_weight.iter().map(|w| w - log_z));
    posterior_log_weights.extend(
        live_logl
            .iter()
            .map(|l| l + log_x - (n as f64).ln() - log_z),
    );

    Ok(NsRunRecord {
        dim,
        dead_states,
        dead_log_likelihood: dead_logl,
        dead_log_volume: dead_logx,
        log_z,
        final_live: live,
        final_live_log_likelihood: live_logl,
        posterior_log_weights,
        threshold_trace,
        iterations: iteration,
        n_likelihood_evals: n_evals,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Draw `n` equal-weight posterior samples from the dead + live points with
/// weights ∝ Lᵢ·ΔXᵢ via systematic resampling.
pub fn posterior_resample(
    record: &NsRunRecord,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SampleSet> {
    if n == 0 {
        return SampleSet::new(Vec::new(), record.dim, None);
    }
    let indices = systematic_indices(&record.posterior_log_weights, n, rng)?;
    let n_dead = record.n_dead();
    let mut states = Vec::with_capacity(n * record.dim);
    for idx in indices {
        if idx < n_dead {
            states.extend_from_slice(record.dead_state(idx));
        } else {
            states.extend_from_slice(record.final_live.state(idx - n_dead));
        }
    }
    SampleSet::new(states, record.dim, None)
}
