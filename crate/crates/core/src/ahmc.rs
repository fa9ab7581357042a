//! Adaptive HMC reference chain: warm-up jointly adapts the step size (dual
//! averaging toward a target acceptance rate) and a diagonal mass matrix
//! (windowed variance estimation), then a long production chain interleaves
//! fixed-length HMC trajectories with global sign flips and thins its output
//! into equal tranches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{hmc_step, leapfrog, z2_flip_step, HmcKernelConfig, LogDensityGrad};
use crate::lattice::{LatticeSpec, Precision, TemperedTarget};
use crate::metrics::SampleSet;
use crate::rng::{derive, stage};

/// Reference-chain configuration. Full-protocol defaults; desk-scale runs
/// override `n_iterations`/`thin`.
#[derive(Debug, Clone)]
pub struct AhmcConfig {
    pub n_warmup: usize,
    pub n_iterations: usize,
    pub thin: usize,
    pub flip_every: usize,
    pub target_accept: f64,
    pub n_leapfrog: usize,
    pub n_tranches: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl AhmcConfig {
    pub fn new(seed: u64) -> Self {
        AhmcConfig {
            n_warmup: 5000,
            n_iterations: 1_000_000,
            thin: 100,
            flip_every: 20,
            target_accept: 0.7,
            n_leapfrog: 20,
            n_tranches: 10,
            precision: Precision::Single,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.flip_every == 0 {
            return Err(Error::Config("thin and flip_every must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Samples retained by the production chain, split into disjoint equal-size
/// tranches.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub tranches: Vec<SampleSet>,
}

impl ReferenceSet {
    /// All tranche rows concatenated into one set.
    pub fn pooled(&self) -> SampleSet {
        let dim = self.tranches.first().map(|t| t.dim()).unwrap_or(1);
        let mut states = Vec::new();
        for t in &self.tranches {
            states.extend_from_slice(t.states());
        }
        SampleSet::new(states, dim, None).expect("tranches share a dimension")
    }
}

/// Warm-up outcome: the frozen kernel, the final state, and adaptation
/// diagnostics.
#[derive(Debug, Clone)]
pub struct WarmupReport {
    pub kernel: HmcKernelConfig,
    pub state: Vec<f64>,
    pub mean_acceptance_last_window: f64,
    pub divergence_rate_last_window: f64,
    pub n_grad_evals: u64,
}

const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
}

impl DualAveraging {
    fn new(eps0: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            m: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64, target: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.m += 1.0;
        let frac = 1.0 / (self.m + T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / GAMMA * self.h_bar;
        let eta = self.m.powf(-KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Double/halve the step size until a single trajectory's acceptance crosses
/// one half.
fn find_reasonable_epsilon<T: LogDensityGrad>(
    target: &T,
    state: &[f64],
    inv_mass: &[f64],
    n_leapfrog: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let v = state.len();
    let trajectory_accept = |eps: f64, rng: &mut ChaCha8Rng| -> f64 {
        let mut pos = state.to_vec();
        let mut mom: Vec<f64> = inv_mass
            .iter()
            .map(|im| rng.sample::<f64, _>(StandardNormal) / im.sqrt())
            .collect();
        let h0 = -target.log_density(&pos)
            + 0.5
                * mom
                    .iter()
                    .zip(inv_mass)
                    .map(|(p, im)| p * p * im)
                    .sum::<f64>();
        let mut grad = vec![0.0; v];
        leapfrog(target, inv_mass, eps, n_leapfrog.max(1), &mut pos, &mut mom, &mut grad);
        let h1 = -target.log_density(&pos)
            + 0.5
                * mom
                    .iter()
                    .zip(inv_mass)
                    .map(|(p, im)| p * p * im)
                    .sum::<f64>();
        if (h1 - h0).is_finite() {
            (-(h1 - h0)).exp().min(1.0)
        } else {
            0.0
        }
    };
    let mut eps = 0.1f64;
    let dir: f64 = if trajectory_accept(eps, rng) > 0.5 {
        2.0
    } else {
        0.5
    };
    for _ in 0..40 {
        let next = eps * dir;
        let a = trajectory_accept(next, rng);
        if (dir > 1.0 && a <= 0.5) || (dir < 1.0 && a >= 0.5) {
            return if dir > 1.0 { eps } else { next };
        }
        eps = next;
    }
    eps
}

struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate (shrunk toward a small diagonal, as in
    /// standard window adaptation).
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.count;
        self.m2
            .iter()
            .map(|m2| {
                let var = if n > 1.0 { m2 / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warm-up: dual-averaging step-size adaptation toward `target_accept`
/// combined with windowed diagonal-variance estimation of the mass matrix.
/// Returns the frozen kernel and final state; errors when more than half of
/// the final window diverges.
pub fn warmup_adapt<T: LogDensityGrad>(
    target: &T,
    dim: usize,
    cfg: &AhmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WarmupReport> {
    warmup_impl(target, dim, cfg, true, rng)
}

fn warmup_impl<T: LogDensityGrad>(
    target: &T,
    dim: usize,
    cfg: &AhmcConfig,
    adapt_mass: bool,
    rng: &mut ChaCha8Rng,
) -> Result<WarmupReport> {
    cfg.validate()?;
    let mut state: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut inv_mass = vec![1.0; dim];
    let mut n_grad_evals = 0u64;

    if cfg.n_warmup == 0 {
        return Ok(WarmupReport {
            kernel: HmcKernelConfig {
                step_size: 0.1,
                n_leapfrog: cfg.n_leapfrog,
                inv_mass_diag: inv_mass,
            },
            state,
            mean_acceptance_last_window: f64::NAN,
            divergence_rate_last_window: 0.0,
            n_grad_evals,
        });
    }

    let total = cfg.n_warmup;
    let head = (0.15 * total as f64) as usize;
    let tail_start = total - (0.10 * total as f64) as usize;

    let mut da = DualAveraging::new(find_reasonable_epsilon(
        target,
        &state,
        &inv_mass,
        cfg.n_leapfrog,
        rng,
    ));
    let mut window = Welford::new(dim);
    let mut window_end = (head + 25).min(tail_start);
    let mut window_size = 25usize;

    let mut logp = target.log_density(&state);
    let mut grad = vec![0.0; dim];
    let mut last_window_accept = Vec::new();
    let mut last_window_divergences = 0usize;

    for iter in 0..total {
        // One trajectory with the current step size, tracking the acceptance
        // probability for dual averaging.
        let eps = da.current().min(10.0).max(1e-10);
        let mut pos = state.clone();
        let mut mom: Vec<f64> = inv_mass
            .iter()
            .map(|im| rng.sample::<f64, _>(StandardNormal) / im.sqrt())
            .collect();
        let kinetic_in: f64 = 0.5
            * mom
                .iter()
                .zip(&inv_mass)
                .map(|(p, im)| p * p * im)
                .sum::<f64>();
        n_grad_evals += leapfrog(
            target,
            &inv_mass,
            eps,
            cfg.n_leapfrog.max(1),
            &mut pos,
            &mut mom,
            &mut grad,
        ) as u64;
        let logp_new = target.log_density(&pos);
        let kinetic_out: f64 = 0.5
            * mom
                .iter()
                .zip(&inv_mass)
                .map(|(p, im)| p * p * im)
                .sum::<f64>();
        let delta_h = (-logp_new + kinetic_out) - (-logp + kinetic_in);
        let diverged = !delta_h.is_finite() || delta_h > DIVERGENCE_THRESHOLD;
        let accept_prob = if diverged {
            0.0
        } else {
            (-delta_h).exp().min(1.0)
        };
        if !diverged && (delta_h <= 0.0 || rng.gen::<f64>().ln() < -delta_h) {
            state = pos;
            logp = logp_new;
        }
        da.update(accept_prob, cfg.target_accept);

        if iter >= tail_start {
            last_window_accept.push(accept_prob);
            if diverged {
                last_window_divergences += 1;
            }
        }

        if adapt_mass && iter >= head && iter < tail_start {
            window.push(&state);
            if iter + 1 == window_end {
                inv_mass = window.regularized_variance();
                window = Welford::new(dim);
                window_size *= 2;
                window_end = (window_end + window_size).min(tail_start);
                // Re-anchor the step size to the new metric.
                da = DualAveraging::new(find_reasonable_epsilon(
                    target,
                    &state,
                    &inv_mass,
                    cfg.n_leapfrog,
                    rng,
                ));
            }
        }
    }

    let divergence_rate = if last_window_accept.is_empty() {
        0.0
    } else {
        last_window_divergences as f64 / last_window_accept.len() as f64
    };
    if divergence_rate > 0.5 {
        return Err(Error::WarmupDivergence {
            rate: divergence_rate,
        });
    }
    let mean_acceptance = if last_window_accept.is_empty() {
        f64::NAN
    } else {
        last_window_accept.iter().sum::<f64>() / last_window_accept.len() as f64
    };

    Ok(WarmupReport {
        kernel: HmcKernelConfig {
            step_size: da.averaged(),
            n_leapfrog: cfg.n_leapfrog,
            inv_mass_diag: inv_mass,
        },
        state,
        mean_acceptance_last_window: mean_acceptance,
        divergence_rate_last_window: divergence_rate,
        n_grad_evals,
    })
}

/// A completed reference run.
#[derive(Debug, Clone)]
pub struct AhmcRun {
    pub reference: ReferenceSet,
    pub kernel: HmcKernelConfig,
    pub acceptance_rate: f64,
    pub flip_acceptance_rate: f64,
    pub n_density_evals: u64,
    pub wall_time: f64,
}

/// Run the reference chain on the φ⁴ target at β = 1: warm-up, then a
/// production chain with a sign flip every `flip_every` iterations, keeping
/// every `thin`-th state and splitting the output into tranches.
pub fn run_ahmc(spec: &LatticeSpec, cfg: &AhmcConfig) -> Result<AhmcRun> {
    let target = TemperedTarget::new(*spec, 1.0, cfg.precision)?;
    run_ahmc_on(&target, spec.volume(), cfg)
}

/// Same as [`run_ahmc`] for an arbitrary differentiable target (used by the
/// validation suites with Gaussian targets).
pub fn run_ahmc_on<T: LogDensityGrad>(target: &T, dim: usize, cfg: &AhmcConfig) -> Result<AhmcRun> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut rng = derive(cfg.seed, &[stage::WARMUP]);
    let warmup = warmup_adapt(target, dim, cfg, &mut rng)?;
    let kernel = warmup.kernel.clone();
    let mut state = warmup.state.clone();
    let mut n_density_evals = warmup.n_grad_evals;

    let mut rng = derive(cfg.seed, &[stage::PRODUCTION]);
    let mut logp = target.log_density(&state);
    n_density_evals += 1;
    let mut retained: Vec<f64> = Vec::new();
    let mut n_retained = 0usize;
    let mut accepts = 0u64;
    let mut flips = 0u64;
    let mut flip_accepts = 0u64;

    for iter in 1..=cfg.n_iterations {
        let r = hmc_step(target, &kernel, &mut state, logp, &mut rng);
        logp = r.log_density;
        accepts += r.accepted as u64;
        n_density_evals += r.n_evals as u64;
        if iter % cfg.flip_every == 0 {
            let f = z2_flip_step(target, &mut state, logp, &mut rng);
            logp = f.log_density;
            flips += 1;
            flip_accepts += f.accepted as u64;
            n_density_evals += 1;
        }
        if iter % cfg.thin == 0 {
            retained.extend_from_slice(&state);
            n_retained += 1;
        }
    }

    // Split into equal disjoint tranches, dropping any remainder.
    let per_tranche = (n_retained / cfg.n_tranches).max(1);
    let mut tranches = Vec::new();
    for t in 0..cfg.n_tranches {
        let lo = t * per_tranche * dim;
        let hi = ((t + 1) * per_tranche * dim).min(retained.len());
        if lo >= hi {
            break;
        }
        tranches.push(SampleSet::new(retained[lo..hi].to_vec(), dim, None)?);
    }

    Ok(AhmcRun {
        reference: ReferenceSet { tranches },
        kernel,
        acceptance_rate: if cfg.n_iterations > 0 {
            accepts as f64 / cfg.n_iterations as f64
        } else {
            f64::NAN
        },
        flip_acceptance_rate: if flips > 0 {
            flip_accepts as f64 / flips as f64
        } else {
            f64::NAN
        },
        n_density_evals,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
