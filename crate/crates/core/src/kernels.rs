//! Inner MCMC transition kernels: random-walk Metropolis–Hastings, independent
//! MH, Hamiltonian Monte Carlo, hard-constraint slice sampling, and the global
//! sign-flip move. All kernels are pure per-particle transitions driven by an
//! explicit generator, so the drivers can apply them in parallel across a
//! cloud with per-particle streams.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{empirical_mean_cov, ParticleCloud};
use crate::error::Result;
use crate::linalg::CholFactor;

/// Unnormalized log-density evaluation.
pub trait LogDensity: Sync {
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Log-density with gradient, required by HMC.
pub trait LogDensityGrad: LogDensity {
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
}

impl LogDensity for crate::lattice::TemperedTarget {
    fn log_density(&self, x: &[f64]) -> f64 {
        crate::lattice::TemperedTarget::log_density(self, x)
    }
}

impl LogDensityGrad for crate::lattice::TemperedTarget {
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        crate::lattice::TemperedTarget::gradient(self, x, grad)
    }
}

/// Random-walk proposal: φ' = φ + √scale · L z. The default scale follows the
/// optimal-acceptance rule 2.38²/V.
#[derive(Debug, Clone)]
pub struct RwKernelConfig {
    pub cov_chol: CholFactor,
    pub scale: f64,
}

impl RwKernelConfig {
    pub fn new(cov_chol: CholFactor) -> Self {
        let v = cov_chol.dim() as f64;
        RwKernelConfig {
            cov_chol,
            scale: 2.38 * 2.38 / v,
        }
    }
}

/// Independent Gaussian proposal N(mean, L Lᵀ).
#[derive(Debug, Clone)]
pub struct IrmhKernelConfig {
    pub mean: Vec<f64>,
    pub cov_chol: CholFactor,
}

/// Fixed-length leapfrog HMC with a diagonal mass matrix (stored as its
/// inverse).
#[derive(Debug, Clone)]
pub struct HmcKernelConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub inv_mass_diag: Vec<f64>,
}

/// Direction-sampling configuration for the constrained slice kernel.
#[derive(Debug, Clone)]
pub struct SliceKernelConfig {
    pub cov_chol: CholFactor,
    pub max_shrink: usize,
}

impl SliceKernelConfig {
    pub fn new(cov_chol: CholFactor) -> Self {
        SliceKernelConfig {
            cov_chol,
            max_shrink: 100,
        }
    }
}

/// Outcome of one kernel application. `log_density` caches the target value
/// at the returned state; for the slice kernel it caches the constrained
/// log-likelihood instead.
#[derive(Debug, Clone, Copy)]
pub struct KernelStepResult {
    pub accepted: bool,
    pub log_density: f64,
    pub n_evals: u32,
    /// Slice kernel only: shrinkage hit its cap and the state was left
    /// unchanged.
    pub stalled: bool,
}

/// One random-walk MH step. The state is updated in place on acceptance.
/// A non-finite proposal density is an automatic rejection, not an error.
pub fn rwmh_step<T: LogDensity, R: Rng>(
    target: &T,
    cfg: &RwKernelConfig,
    state: &mut [f64],
    current_log_density: f64,
    rng: &mut R,
) -> KernelStepResult {
    let v = state.len();
    debug_assert_eq!(cfg.cov_chol.dim(), v);
    let z: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut step = vec![0.0; v];
    cfg.cov_chol.tri_mul(&z, &mut step);
    let sqrt_scale = cfg.scale.sqrt();
    let proposal: Vec<f64> = state
        .iter()
        .zip(&step)
        .map(|(x, s)| x + sqrt_scale * s)
        .collect();
    let proposal_log_density = target.log_density(&proposal);
    let log_alpha = proposal_log_density - current_log_density;
    let accept = proposal_log_density.is_finite()
        && (log_alpha >= 0.0 || rng.gen::<f64>().ln() < log_alpha);
    if accept {
        state.copy_from_slice(&proposal);
        KernelStepResult {
            accepted: true,
            log_density: proposal_log_density,
            n_evals: 1,
            stalled: false,
        }
    } else {
        KernelStepResult {
            accepted: false,
            log_density: current_log_density,
            n_evals: 1,
            stalled: false,
        }
    }
}

/// One independent MH step with proposal N(mean, Σ). The proposal density is
/// evaluated through the Cholesky factor (including the log-determinant).
pub fn irmh_step<T: LogDensity, R: Rng>(
    target: &T,
    cfg: &IrmhKernelConfig,
    state: &mut [f64],
    current_log_density: f64,
    rng: &mut R,
) -> KernelStepResult {
    let v = state.len();
    debug_assert_eq!(cfg.cov_chol.dim(), v);
    let z: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut step = vec![0.0; v];
    cfg.cov_chol.tri_mul(&z, &mut step);
    let proposal: Vec<f64> = cfg.mean.iter().zip(&step).map(|(m, s)| m + s).collect();
    // q(proposal) comes straight from the generating z.
    let half_log_norm =
        0.5 * cfg.cov_chol.log_det_cov() + 0.5 * v as f64 * (2.0 * std::f64::consts::PI).ln();
    let q_proposal = -0.5 * z.iter().map(|x| x * x).sum::<f64>() - half_log_norm;
    let mut scratch = Vec::new();
    let q_current = cfg.cov_chol.mvn_log_density(&cfg.mean, state, &mut scratch);
    let proposal_log_density = target.log_density(&proposal);
    let log_alpha = (proposal_log_density - q_proposal) - (current_log_density - q_current);
    let accept =
        proposal_log_density.is_finite() && (log_alpha >= 0.0 || rng.gen::<f64>().ln() < log_alpha);
    if accept {
        state.copy_from_slice(&proposal);
        KernelStepResult {
            accepted: true,
            log_density: proposal_log_density,
            n_evals: 1,
            stalled: false,
        }
    } else {
        KernelStepResult {
            accepted: false,
            log_density: current_log_density,
            n_evals: 1,
            stalled: false,
        }
    }
}

/// Leapfrog integration of `n_steps` with step `eps` under a diagonal mass
/// matrix. Positions and momenta are updated in place; the gradient buffer is
/// caller-provided scratch. Returns the number of gradient evaluations.
pub fn leapfrog<T: LogDensityGrad>(
    target: &T,
    inv_mass_diag: &[f64],
    eps: f64,
    n_steps: usize,
    position: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
) -> u32 {
    if n_steps == 0 {
        return 0;
    }
    let mut n_evals = 1u32;
    target.gradient(position, grad);
    for (p, g) in momentum.iter_mut().zip(grad.iter()) {
        *p += 0.5 * eps * g;
    }
    for step in 0..n_steps {
        for ((x, p), im) in position.iter_mut().zip(momentum.iter()).zip(inv_mass_diag) {
            *x += eps * im * p;
        }
        target.gradient(position, grad);
        n_evals += 1;
        let half = if step + 1 == n_steps { 0.5 } else { 1.0 };
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += half * eps * g;
        }
    }
    n_evals
}

/// One HMC step: momentum refreshment, fixed-length leapfrog trajectory,
/// Metropolis correction on the Hamiltonian error. Non-finite trajectories
/// auto-reject.
pub fn hmc_step<T: LogDensityGrad, R: Rng>(
    target: &T,
    cfg: &HmcKernelConfig,
    state: &mut [f64],
    current_log_density: f64,
    rng: &mut R,
) -> KernelStepResult {
    let v = state.len();
    debug_assert_eq!(cfg.inv_mass_diag.len(), v);
    // p ~ N(0, M) with M = diag(1 / inv_mass).
    let mut momentum: Vec<f64> = cfg
        .inv_mass_diag
        .iter()
        .map(|im| rng.sample::<f64, _>(StandardNormal) / im.sqrt())
        .collect();
    let kinetic_in: f64 = 0.5
        * momentum
            .iter()
            .zip(&cfg.inv_mass_diag)
            .map(|(p, im)| p * p * im)
            .sum::<f64>();
    let mut position = state.to_vec();
    let mut grad = vec![0.0; v];
    let n_evals = leapfrog(
        target,
        &cfg.inv_mass_diag,
        cfg.step_size,
        cfg.n_leapfrog,
        &mut position,
        &mut momentum,
        &mut grad,
    );
    let proposal_log_density = target.log_density(&position);
    let kinetic_out: f64 = 0.5
        * momentum
            .iter()
            .zip(&cfg.inv_mass_diag)
            .map(|(p, im)| p * p * im)
            .sum::<f64>();
    let delta_h = (-proposal_log_density + kinetic_out) - (-current_log_density + kinetic_in);
    let accept = delta_h.is_finite()
        && proposal_log_density.is_finite()
        && (delta_h <= 0.0 || rng.gen::<f64>().ln() < -delta_h);
    if accept {
        state.copy_from_slice(&position);
        KernelStepResult {
            accepted: true,
            log_density: proposal_log_density,
            n_evals: n_evals + 1,
            stalled: false,
        }
    } else {
        KernelStepResult {
            accepted: false,
            log_density: current_log_density,
            n_evals: n_evals + 1,
            stalled: false,
        }
    }
}

/// Step-out expansions per side for the slice bracket.
const MAX_STEPOUT: usize = 8;

/// One hard-constraint slice step: the new point must satisfy
/// `log_likelihood > level`. A direction is drawn from the tuned covariance
/// (normalized so one bracket unit is one cloud standard deviation along the
/// direction), an interval is bracketed by stepping out, then shrunk until an
/// acceptable point is found. If shrinkage exceeds its cap the original state
/// is returned with `stalled` set; a constraint-violating state is never
/// returned.
pub fn slice_step_constrained<F, R>(
    log_likelihood: F,
    level: f64,
    cfg: &SliceKernelConfig,
    state: &mut [f64],
    rng: &mut R,
) -> KernelStepResult
where
    F: Fn(&[f64]) -> f64,
    R: Rng,
{
    let v = state.len();
    debug_assert_eq!(cfg.cov_chol.dim(), v);
    let z: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let unit: Vec<f64> = z.iter().map(|x| x / norm).collect();
    let mut direction = vec![0.0; v];
    cfg.cov_chol.tri_mul(&unit, &mut direction);

    let mut n_evals = 0u32;
    let mut point = vec![0.0; v];
    let eval_at = |t: f64, point: &mut Vec<f64>, n_evals: &mut u32| {
        for ((q, x), d) in point.iter_mut().zip(state.iter()).zip(&direction) {
            *q = x + t * d;
        }
        *n_evals += 1;
        log_likelihood(point)
    };

    // Initial bracket of width 2 (two standard deviations along the
    // direction), placed uniformly around the current point, then stepped out
    // while the ends still satisfy the constraint.
    let width = 2.0;
    let u: f64 = rng.gen();
    let mut lo = -u * width;
    let mut hi = lo + width;
    for _ in 0..MAX_STEPOUT {
        if !(eval_at(lo, &mut point, &mut n_evals) > level) {
            break;
        }
        lo -= width;
    }
    for _ in 0..MAX_STEPOUT {
        if !(eval_at(hi, &mut point, &mut n_evals) > level) {
            break;
        }
        hi += width;
    }

    for _ in 0..cfg.max_shrink {
        let t = rng.gen_range(lo..hi);
        let ll = eval_at(t, &mut point, &mut n_evals);
        if ll > level {
            state.copy_from_slice(&point);
            return KernelStepResult {
                accepted: true,
                log_density: ll,
                n_evals,
                stalled: false,
            };
        }
        // Shrink toward the current point (t = 0).
        if t < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
    }
    KernelStepResult {
        accepted: false,
        log_density: level,
        n_evals,
        stalled: true,
    }
}

/// Global ℤ₂ flip proposal φ → −φ with a standard MH correction. On a
/// sign-symmetric target the move is always accepted.
pub fn z2_flip_step<T: LogDensity, R: Rng>(
    target: &T,
    state: &mut [f64],
    current_log_density: f64,
    rng: &mut R,
) -> KernelStepResult {
    let flipped: Vec<f64> = state.iter().map(|x| -x).collect();
    let flipped_log_density = target.log_density(&flipped);
    let log_alpha = flipped_log_density - current_log_density;
    let accept =
        flipped_log_density.is_finite() && (log_alpha >= 0.0 || rng.gen::<f64>().ln() < log_alpha);
    if accept {
        state.copy_from_slice(&flipped);
        KernelStepResult {
            accepted: true,
            log_density: flipped_log_density,
            n_evals: 1,
            stalled: false,
        }
    } else {
        KernelStepResult {
            accepted: false,
            log_density: current_log_density,
            n_evals: 1,
            stalled: false,
        }
    }
}

/// Which rejuvenation kernel an SMC/NS driver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rw,
    Irmh,
    Hmc,
    Slice,
}

/// A kernel configuration tuned from the particle cloud. The HMC variant is
/// intentionally untouched here: its mass matrix and step size come from
/// warm-up and stay frozen.
#[derive(Debug, Clone)]
pub enum CloudTuned {
    Rw(RwKernelConfig),
    Irmh(IrmhKernelConfig),
    Slice(SliceKernelConfig),
    Hmc,
}

/// Tune a kernel from the cloud's single data-driven covariance estimate.
pub fn tune_from_cloud(cloud: &ParticleCloud, kind: KernelKind) -> Result<CloudTuned> {
    match kind {
        KernelKind::Hmc => Ok(CloudTuned::Hmc),
        _ => {
            let moments = empirical_mean_cov(cloud);
            let chol = CholFactor::from_covariance(&moments.cov, 0.0)?;
            Ok(match kind {
                KernelKind::Rw => CloudTuned::Rw(RwKernelConfig::new(chol)),
                KernelKind::Irmh => CloudTuned::Irmh(IrmhKernelConfig {
                    mean: moments.mean,
                    cov_chol: chol,
                }),
                KernelKind::Slice => CloudTuned::Slice(SliceKernelConfig::new(chol)),
                KernelKind::Hmc => unreachable!(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeSpec, Precision, TemperedTarget};
    use crate::rng::{derive, stage};
    use approx::assert_relative_eq;
    use rand_chacha::ChaCha8Rng;

    fn test_rng(seed: u64) -> ChaCha8Rng {
        derive(seed, &[stage::REJUVENATE, 0, 0])
    }

    struct Flat;
    impl LogDensity for Flat {
        fn log_density(&self, _x: &[f64]) -> f64 {
            0.0
        }
    }

    /// Gaussian with dense precision matrix (unnormalized).
    struct Gaussian {
        mean: Vec<f64>,
        precision: Vec<Vec<f64>>,
    }

    impl Gaussian {
        fn isotropic(dim: usize, var: f64) -> Self {
            let mut precision = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                precision[i][i] = 1.0 / var;
            }
            Gaussian {
                mean: vec![0.0; dim],
                precision,
            }
        }

        fn diag(vars: &[f64]) -> Self {
            let dim = vars.len();
            let mut precision = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                precision[i][i] = 1.0 / vars[i];
            }
            Gaussian {
                mean: vec![0.0; dim],
                precision,
            }
        }
    }

    impl LogDensity for Gaussian {
        fn log_density(&self, x: &[f64]) -> f64 {
            let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            let mut quad = 0.0;
            for (i, di) in d.iter().enumerate() {
                for (j, dj) in d.iter().enumerate() {
                    quad += di * self.precision[i][j] * dj;
                }
            }
            -0.5 * quad
        }
    }

    impl LogDensityGrad for Gaussian {
        fn gradient(&self, x: &[f64], grad: &mut [f64]) {
            let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            for i in 0..x.len() {
                grad[i] = -d
                    .iter()
                    .enumerate()
                    .map(|(j, dj)| self.precision[i][j] * dj)
                    .sum::<f64>();
            }
        }
    }

    #[test]
    fn rw_on_flat_target_always_accepts() {
        let cfg = RwKernelConfig::new(CholFactor::identity(3));
        let mut rng = test_rng(1);
        let mut state = vec![0.0; 3];
        for _ in 0..200 {
            let r = rwmh_step(&Flat, &cfg, &mut state, 0.0, &mut rng);
            assert!(r.accepted);
        }
    }

    #[test]
    fn rw_zero_scale_proposes_current_state_and_accepts() {
        let mut cfg = RwKernelConfig::new(CholFactor::identity(2));
        cfg.scale = 0.0;
        let g = Gaussian::isotropic(2, 1.0);
        let mut state = vec![0.4, -0.2];
        let before = state.clone();
        let logp = g.log_density(&state);
        let mut rng = test_rng(2);
        let r = rwmh_step(&g, &cfg, &mut state, logp, &mut rng);
        assert!(r.accepted);
        assert_eq!(state, before);
    }

    #[test]
    fn rw_auto_rejects_non_finite_proposal_density() {
        struct Hole;
        impl LogDensity for Hole {
            fn log_density(&self, x: &[f64]) -> f64 {
                if x[0] > 0.0 {
                    f64::NAN
                } else {
                    0.0
                }
            }
        }
        let cfg = RwKernelConfig::new(CholFactor::identity(1));
        let mut rng = test_rng(3);
        let mut rejected = 0;
        for _ in 0..200 {
            // Restart at the boundary so a good share of the proposals land
            // in the NaN region.
            let mut state = vec![-1e-9];
            let r = rwmh_step(&Hole, &cfg, &mut state, 0.0, &mut rng);
            if !r.accepted {
                rejected += 1;
            }
            assert!(state[0] <= 0.0);
        }
        assert!(rejected > 50);
    }

    #[test]
    fn rw_acceptance_matches_independent_scalar_oracle() {
        // Oracle: a hand-rolled 1-D MH chain on the standard normal, written
        // with no shared code with the kernel.
        let n = 100_000;
        let mut oracle_rng = test_rng(10);
        let mut x = 0.0f64;
        let mut oracle_accepts = 0u32;
        for _ in 0..n {
            let z: f64 = oracle_rng.sample(StandardNormal);
            let y = x + 2.38 * z;
            let log_alpha = 0.5 * (x * x - y * y);
            if log_alpha >= 0.0 || oracle_rng.gen::<f64>().ln() < log_alpha {
                x = y;
                oracle_accepts += 1;
            }
        }
        let oracle_rate = oracle_accepts as f64 / n as f64;

        let g = Gaussian::isotropic(1, 1.0);
        let cfg = RwKernelConfig::new(CholFactor::identity(1));
        assert_relative_eq!(cfg.scale, 2.38 * 2.38, epsilon = 1e-12);
        let mut rng = test_rng(11);
        let mut state = vec![0.0];
        let mut logp = g.log_density(&state);
        let mut accepts = 0u32;
        for _ in 0..n {
            let r = rwmh_step(&g, &cfg, &mut state, logp, &mut rng);
            logp = r.log_density;
            if r.accepted {
                accepts += 1;
            }
        }
        let rate = accepts as f64 / n as f64;
        assert!(
            (rate - oracle_rate).abs() < 0.02,
            "kernel {rate} vs oracle {oracle_rate}"
        );
    }

    #[test]
    fn irmh_with_exact_proposal_always_accepts() {
        // Target equal to the proposal: the MH ratio is identically 1.
        struct MvnTarget {
            chol: CholFactor,
            mean: Vec<f64>,
        }
        impl LogDensity for MvnTarget {
            fn log_density(&self, x: &[f64]) -> f64 {
                let mut scratch = Vec::new();
                self.chol.mvn_log_density(&self.mean, x, &mut scratch)
            }
        }
        let cov =
            nalgebra::DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.9]);
        let chol = CholFactor::from_covariance(&cov, 0.0).unwrap();
        let mean = vec![0.3, -0.7];
        let target = MvnTarget {
            chol: chol.clone(),
            mean: mean.clone(),
        };
        let cfg = IrmhKernelConfig {
            mean,
            cov_chol: chol,
        };
        let mut rng = test_rng(12);
        let mut state = vec![0.3, -0.7];
        let mut logp = target.log_density(&state);
        for _ in 0..500 {
            let r = irmh_step(&target, &cfg, &mut state, logp, &mut rng);
            assert!(r.accepted);
            logp = r.log_density;
        }
    }

    #[test]
    fn irmh_far_proposal_acceptance_collapses() {
        let g = Gaussian::isotropic(1, 0.01);
        let cfg = IrmhKernelConfig {
            mean: vec![50.0],
            cov_chol: CholFactor::identity(1),
        };
        let mut rng = test_rng(13);
        let mut state = vec![0.0];
        let mut logp = g.log_density(&state);
        let mut accepts = 0u32;
        for _ in 0..2000 {
            let r = irmh_step(&g, &cfg, &mut state, logp, &mut rng);
            logp = r.log_density;
            accepts += r.accepted as u32;
        }
        assert!(accepts <= 2, "expected near-zero acceptance, got {accepts}");
    }

    #[test]
    fn irmh_acceptance_matches_monte_carlo_oracle() {
        // 2-D Gaussian target with a mismatched isotropic proposal. The
        // stationary acceptance rate is E_{x~p, y~q} min(1, r(y)/r(x)) with
        // r = p/q; estimate it by direct Monte Carlo over exact draws.
        let target_vars = [1.0, 0.25];
        let g = Gaussian::diag(&target_vars);
        let proposal_var = 0.8;
        let mut chol = CholFactor::identity(2);
        chol = {
            let cov = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[
                proposal_var,
                proposal_var,
            ]));
            let _ = chol;
            CholFactor::from_covariance(&cov, 0.0).unwrap()
        };
        let cfg = IrmhKernelConfig {
            mean: vec![0.0, 0.0],
            cov_chol: chol,
        };

        let log_r = |x: &[f64]| {
            let lp = g.log_density(x);
            let lq = -0.5 * (x[0] * x[0] + x[1] * x[1]) / proposal_var
                - (2.0 * std::f64::consts::PI * proposal_var).ln();
            lp - lq
        };
        let mut oracle_rng = test_rng(14);
        let n_mc = 400_000;
        let mut acc = 0.0;
        for _ in 0..n_mc {
            let x = [
                target_vars[0].sqrt() * oracle_rng.sample::<f64, _>(StandardNormal),
                target_vars[1].sqrt() * oracle_rng.sample::<f64, _>(StandardNormal),
            ];
            let y = [
                proposal_var.sqrt() * oracle_rng.sample::<f64, _>(StandardNormal),
                proposal_var.sqrt() * oracle_rng.sample::<f64, _>(StandardNormal),
            ];
            acc += (log_r(&y) - log_r(&x)).exp().min(1.0);
        }
        let oracle_rate = acc / n_mc as f64;

        let mut rng = test_rng(15);
        let mut state = vec![0.1, 0.1];
        let mut logp = g.log_density(&state);
        let n = 200_000;
        let mut accepts = 0u32;
        for _ in 0..n {
            // The target here is unnormalized, which MH is invariant to.
            let r = irmh_step(&g, &cfg, &mut state, logp, &mut rng);
            logp = r.log_density;
            accepts += r.accepted as u32;
        }
        let rate = accepts as f64 / n as f64;
        assert!(
            (rate - oracle_rate).abs() < 0.02,
            "kernel {rate} vs oracle {oracle_rate}"
        );
    }

    #[test]
    fn hmc_tiny_step_always_accepts() {
        let g = Gaussian::diag(&[1.0, 0.0625]);
        let cfg = HmcKernelConfig {
            step_size: 1e-4,
            n_leapfrog: 5,
            inv_mass_diag: vec![1.0; 2],
        };
        let mut rng = test_rng(16);
        let mut state = vec![0.5, -0.1];
        let mut logp = g.log_density(&state);
        for _ in 0..100 {
            let r = hmc_step(&g, &cfg, &mut state, logp, &mut rng);
            assert!(r.accepted);
            logp = r.log_density;
        }
    }

    #[test]
    fn leapfrog_energy_error_is_small_below_stability_threshold() {
        // Hessian eigenvalues of the diag(1, 1/16) Gaussian are (1, 16), so
        // the stability threshold is 2/4 = 0.5; integrate well below it.
        let g = Gaussian::diag(&[1.0, 0.0625]);
        let eps = 0.02;
        let inv_mass = vec![1.0; 2];
        let mut rng = test_rng(17);
        for _ in 0..50 {
            let mut pos = vec![
                rng.sample::<f64, _>(StandardNormal),
                0.25 * rng.sample::<f64, _>(StandardNormal),
            ];
            let mut mom = vec![
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ];
            let h0 = -g.log_density(&pos)
                + 0.5 * mom.iter().map(|p| p * p).sum::<f64>();
            let mut grad = vec![0.0; 2];
            leapfrog(&g, &inv_mass, eps, 20, &mut pos, &mut mom, &mut grad);
            let h1 = -g.log_density(&pos)
                + 0.5 * mom.iter().map(|p| p * p).sum::<f64>();
            assert!((h1 - h0).abs() < 1e-2, "|dH| = {}", (h1 - h0).abs());
        }
    }

    #[test]
    fn leapfrog_is_time_reversible() {
        let spec = LatticeSpec::new(3, -4.0, 1.0).unwrap();
        let target = TemperedTarget::new(spec, 1.0, Precision::Double).unwrap();
        let mut rng = test_rng(18);
        let v = 9;
        let start: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mom0: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let inv_mass = vec![1.0; v];
        let mut pos = start.clone();
        let mut mom = mom0.clone();
        let mut grad = vec![0.0; v];
        leapfrog(&target, &inv_mass, 0.05, 25, &mut pos, &mut mom, &mut grad);
        for p in mom.iter_mut() {
            *p = -*p;
        }
        leapfrog(&target, &inv_mass, 0.05, 25, &mut pos, &mut mom, &mut grad);
        for (a, b) in pos.iter().zip(&start) {
            assert!((a - b).abs() < 1e-5, "round trip drift {}", (a - b).abs());
        }
    }

    #[test]
    fn slice_with_no_constraint_accepts_first_draw() {
        let cfg = SliceKernelConfig::new(CholFactor::identity(1));
        let mut rng = test_rng(19);
        let mut state = vec![0.0];
        let r = slice_step_constrained(|_x| 0.0, f64::NEG_INFINITY, &cfg, &mut state, &mut rng);
        assert!(r.accepted);
        assert!(!r.stalled);
        // Step-out runs to its cap on both sides, then the first shrink draw
        // lands inside the (unconstrained) slice.
        assert_eq!(r.n_evals, 2 * MAX_STEPOUT as u32 + 1);
    }

    #[test]
    fn slice_samples_uniformly_on_the_allowed_half() {
        // Likelihood increasing in x on [0, 1]; the constraint keeps (0.5, 1].
        // The stationary law of the constrained kernel there is uniform.
        let loglik = |x: &[f64]| {
            if (0.0..=1.0).contains(&x[0]) {
                x[0]
            } else {
                f64::NEG_INFINITY
            }
        };
        let cfg = SliceKernelConfig::new(CholFactor::identity(1));
        let mut rng = test_rng(20);
        let mut state = vec![0.75];
        let mut samples = Vec::with_capacity(10_000);
        // Thin lightly: KS expects roughly independent draws.
        for i in 0..50_000 {
            let r = slice_step_constrained(loglik, 0.5, &cfg, &mut state, &mut rng);
            assert!(!r.stalled);
            assert!(state[0] > 0.5 && state[0] <= 1.0);
            if i % 5 == 0 {
                samples.push(state[0]);
            }
        }
        let d = ks_statistic_vs_uniform(&mut samples, 0.5, 1.0);
        let n = samples.len() as f64;
        let p = ks_p_value(d * n.sqrt());
        assert!(p > 0.01, "KS p = {p}, D = {d}");
    }

    #[test]
    fn slice_stalls_rather_than_violating_tight_constraints() {
        // Constraint satisfied only inside a ball of radius 1e-12 around the
        // current point; shrinkage cannot find it and must stall.
        let center = [0.3, -0.2];
        let loglik = move |x: &[f64]| {
            let d2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2.sqrt()
        };
        let cfg = SliceKernelConfig {
            cov_chol: CholFactor::identity(2),
            max_shrink: 40,
        };
        let mut rng = test_rng(21);
        let mut state = center.to_vec();
        let r = slice_step_constrained(loglik, -1e-12, &cfg, &mut state, &mut rng);
        assert!(r.stalled);
        assert!(!r.accepted);
        assert_eq!(state, center.to_vec());
    }

    #[test]
    fn z2_flip_always_accepts_on_symmetric_target() {
        let spec = LatticeSpec::new(4, -4.0, 1.0).unwrap();
        let target = TemperedTarget::new(spec, 1.0, Precision::Single).unwrap();
        let mut rng = test_rng(22);
        let mut state: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut logp = target.log_density(&state);
        for _ in 0..50 {
            let r = z2_flip_step(&target, &mut state, logp, &mut rng);
            assert!(r.accepted);
            logp = r.log_density;
        }
    }

    #[test]
    fn z2_flip_on_zero_state_accepts_trivially() {
        let g = Gaussian::isotropic(2, 1.0);
        let mut rng = test_rng(23);
        let mut state = vec![0.0, 0.0];
        let logp = g.log_density(&state);
        let r = z2_flip_step(&g, &mut state, logp, &mut rng);
        assert!(r.accepted);
        assert_eq!(state, vec![0.0, 0.0]);
    }

    #[test]
    fn z2_flip_matches_hand_ratio_on_asymmetric_target() {
        // ℓ(φ) = −(φ−1)²/2 gives ℓ(−φ) − ℓ(φ) = −2φ.
        struct Shifted;
        impl LogDensity for Shifted {
            fn log_density(&self, x: &[f64]) -> f64 {
                -0.5 * (x[0] - 1.0) * (x[0] - 1.0)
            }
        }
        let phi = 0.8;
        let expect = (-2.0 * phi * 1.0f64).exp().min(1.0);
        let n = 200_000;
        let mut accepts = 0u32;
        let mut rng = test_rng(24);
        for _ in 0..n {
            let mut state = vec![phi];
            let r = z2_flip_step(&Shifted, &mut state, Shifted.log_density(&[phi]), &mut rng);
            accepts += r.accepted as u32;
        }
        let rate = accepts as f64 / n as f64;
        assert!((rate - expect).abs() < 0.01, "rate {rate} vs {expect}");
    }

    #[test]
    fn tune_from_cloud_recovers_identity_covariance() {
        let n = 10_000;
        let v = 4;
        let cloud = ParticleCloud::standard_normal(n, v, test_rng(25));
        let tuned = tune_from_cloud(&cloud, KernelKind::Rw).unwrap();
        let CloudTuned::Rw(cfg) = tuned else {
            panic!("wrong kind")
        };
        // Reconstruct the covariance from the factor and compare to identity
        // in operator norm.
        let mut cov = nalgebra::DMatrix::zeros(v, v);
        for j in 0..v {
            let mut e = vec![0.0; v];
            e[j] = 1.0;
            let mut col = vec![0.0; v];
            cfg.cov_chol.tri_mul(&e, &mut col);
            for i in 0..v {
                cov[(i, j)] = col[i];
            }
        }
        let cov = &cov * cov.transpose();
        let diff = cov - nalgebra::DMatrix::identity(v, v);
        let sym = nalgebra::SymmetricEigen::new(diff);
        let op_norm = sym
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &e| m.max(e.abs()));
        assert!(op_norm < 0.1, "operator norm {op_norm}");
    }

    #[test]
    fn tune_from_degenerate_cloud_does_not_fail() {
        let states = vec![1.0; 8];
        let cloud =
            ParticleCloud::new(states, vec![0.0; 4], 2, test_rng(26));
        assert!(tune_from_cloud(&cloud, KernelKind::Irmh).is_ok());
        assert!(tune_from_cloud(&cloud, KernelKind::Slice).is_ok());
    }

    #[test]
    fn rw_scale_default_pins_optimal_rule() {
        let cfg = RwKernelConfig::new(CholFactor::identity(100));
        assert_relative_eq!(cfg.scale, 0.056644, epsilon = 1e-12);
    }

    #[test]
    fn kernels_are_deterministic_given_streams() {
        let spec = LatticeSpec::new(3, -4.0, 1.0).unwrap();
        let target = TemperedTarget::new(spec, 0.7, Precision::Single).unwrap();
        let cfg = RwKernelConfig::new(CholFactor::identity(9));
        let run = |seed: u64| {
            let mut rng = test_rng(seed);
            let mut state = vec![0.1; 9];
            let mut logp = target.log_density(&state);
            for _ in 0..50 {
                logp = rwmh_step(&target, &cfg, &mut state, logp, &mut rng).log_density;
            }
            state
        };
        assert_eq!(run(99), run(99));
        assert_ne!(run(99), run(100));
    }

    /// Long-chain moment check on a correlated 2-D Gaussian for each MH
    /// kernel; standard errors come from batch means.
    #[test]
    fn mh_kernels_reproduce_gaussian_moments() {
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.5]);
        let prec = cov.clone().try_inverse().unwrap();
        let target = Gaussian {
            mean: vec![0.0, 0.0],
            precision: vec![
                vec![prec[(0, 0)], prec[(0, 1)]],
                vec![prec[(1, 0)], prec[(1, 1)]],
            ],
        };
        let chol = CholFactor::from_covariance(&cov, 0.0).unwrap();

        enum K {
            Rw(RwKernelConfig),
            Irmh(IrmhKernelConfig),
            Hmc(HmcKernelConfig),
        }
        let kernels = vec![
            K::Rw(RwKernelConfig {
                cov_chol: chol.clone(),
                scale: 2.38 * 2.38 / 2.0,
            }),
            K::Irmh(IrmhKernelConfig {
                mean: vec![0.2, -0.1],
                cov_chol: CholFactor::from_covariance(
                    &nalgebra::DMatrix::from_row_slice(2, 2, &[1.4, 0.3, 0.3, 2.0]),
                    0.0,
                )
                .unwrap(),
            }),
            K::Hmc(HmcKernelConfig {
                step_size: 0.3,
                n_leapfrog: 8,
                inv_mass_diag: vec![1.0, 1.5],
            }),
        ];

        for (ki, kernel) in kernels.iter().enumerate() {
            let n = 100_000usize;
            let burn = 5_000usize;
            let mut rng = test_rng(30 + ki as u64);
            let mut state = vec![0.0, 0.0];
            let mut logp = target.log_density(&state);
            let mut xs: Vec<[f64; 2]> = Vec::with_capacity(n);
            for i in 0..n + burn {
                let r = match kernel {
                    K::Rw(cfg) => rwmh_step(&target, cfg, &mut state, logp, &mut rng),
                    K::Irmh(cfg) => irmh_step(&target, cfg, &mut state, logp, &mut rng),
                    K::Hmc(cfg) => hmc_step(&target, cfg, &mut state, logp, &mut rng),
                };
                logp = r.log_density;
                if i >= burn {
                    xs.push([state[0], state[1]]);
                }
            }
            // Batch-means standard error of the mean.
            let batches = 100;
            let bs = n / batches;
            for d in 0..2 {
                let series: Vec<f64> = xs.iter().map(|x| x[d]).collect();
                let mean = series.iter().sum::<f64>() / n as f64;
                let batch_means: Vec<f64> = (0..batches)
                    .map(|b| series[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
                    .collect();
                let (_, bsd) = crate::math::mean_std(&batch_means);
                let se = bsd / (batches as f64).sqrt();
                assert!(
                    mean.abs() < 3.0 * se.max(1e-3),
                    "kernel {ki} dim {d}: mean {mean} vs se {se}"
                );
            }
            for (r, c) in [(0, 0), (0, 1), (1, 1)] {
                let emp = xs
                    .iter()
                    .map(|x| x[r] * x[c])
                    .sum::<f64>()
                    / n as f64;
                let truth = cov[(r, c)];
                assert!(
                    (emp - truth).abs() / truth.abs() < 0.05,
                    "kernel {ki} cov[{r}{c}]: {emp} vs {truth}"
                );
            }
        }
    }

    // --- tiny KS helpers -------------------------------------------------

    fn ks_statistic_vs_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let cdf = (x - lo) / (hi - lo);
            let lo_emp = i as f64 / n;
            let hi_emp = (i + 1) as f64 / n;
            d = d.max((cdf - lo_emp).abs()).max((cdf - hi_emp).abs());
        }
        d
    }

    /// Asymptotic Kolmogorov distribution tail: P(sqrt(n) D > t).
    fn ks_p_value(t: f64) -> f64 {
        let mut p = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k + 1) * (-2.0 * kf * kf * t * t).exp();
        }
        p.clamp(0.0, 1.0)
    }
}
