//! The 2-D scalar φ⁴ lattice model: Euclidean action, gradient, observables,
//! the tempered target family, and the κ-parameterized alternative action.
//!
//! Fields live on an L×L periodic lattice and are stored as flat row-major
//! vectors (`site (i, j) -> i * L + j`). Neighbor indexing uses modular
//! arithmetic; the kinetic term sums each forward link once (over every site
//! and both positive directions).

use crate::error::{Error, Result};

/// Lattice geometry and couplings: side length `L`, bare mass squared `m0_sq`,
/// quartic coupling `lambda`. The dimension is fixed to 2, lattice spacing 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    pub l: usize,
    pub m0_sq: f64,
    pub lambda: f64,
}

pub const DIMS: usize = 2;

impl LatticeSpec {
    pub fn new(l: usize, m0_sq: f64, lambda: f64) -> Result<Self> {
        if l == 0 {
            return Err(Error::Config("lattice side length must be >= 1".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "quartic coupling must be nonnegative, got {lambda}"
            )));
        }
        if !m0_sq.is_finite() || !lambda.is_finite() {
            return Err(Error::NonFinite("lattice couplings"));
        }
        Ok(LatticeSpec { l, m0_sq, lambda })
    }

    /// Number of sites V = L².
    pub fn volume(&self) -> usize {
        self.l * self.l
    }
}

/// Arithmetic precision of the action / log-density evaluation paths.
///
/// Samplers default to `Single` (the hot path runs in f32); oracles and
/// validation always use the f64 path. Log-weight accumulation is f64 in
/// either mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// One lattice state φ ∈ ℝ^V, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfiguration {
    values: Vec<f64>,
}

impl FieldConfiguration {
    pub fn new(values: Vec<f64>, spec: &LatticeSpec) -> Result<Self> {
        if values.len() != spec.volume() {
            return Err(Error::DimensionMismatch {
                expected: spec.volume(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field configuration"));
        }
        Ok(FieldConfiguration { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl std::ops::Deref for FieldConfiguration {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Euclidean action S_E(φ) = Σ_x [ ½ Σ_μ (φ_{x+μ̂}−φ_x)² + ½ m₀² φ_x² + λ φ_x⁴ ],
/// with periodic wrap in both directions, evaluated in double precision.
pub fn action(spec: &LatticeSpec, phi: &[f64]) -> f64 {
    let l = spec.l;
    assert_eq!(phi.len(), spec.volume(), "field length mismatch");
    let mut kinetic = 0.0f64;
    let mut mass = 0.0f64;
    let mut quartic = 0.0f64;
    for i in 0..l {
        let ip = if i + 1 == l { 0 } else { i + 1 };
        let row = i * l;
        let row_ip = ip * l;
        for j in 0..l {
            let jp = if j + 1 == l { 0 } else { j + 1 };
            let p = phi[row + j];
            let d0 = phi[row_ip + j] - p;
            let d1 = phi[row + jp] - p;
            kinetic += d0 * d0 + d1 * d1;
            let p2 = p * p;
            mass += p2;
            quartic += p2 * p2;
        }
    }
    0.5 * kinetic + 0.5 * spec.m0_sq * mass + spec.lambda * quartic
}

/// Single-precision evaluation of the action (inputs rounded to f32, all
/// arithmetic in f32, result widened).
pub fn action_f32(spec: &LatticeSpec, phi: &[f64]) -> f64 {
    let l = spec.l;
    assert_eq!(phi.len(), spec.volume(), "field length mismatch");
    let m0_sq = spec.m0_sq as f32;
    let lambda = spec.lambda as f32;
    let mut kinetic = 0.0f32;
    let mut mass = 0.0f32;
    let mut quartic = 0.0f32;
    for i in 0..l {
        let ip = if i + 1 == l { 0 } else { i + 1 };
        let row = i * l;
        let row_ip = ip * l;
        for j in 0..l {
            let jp = if j + 1 == l { 0 } else { j + 1 };
            let p = phi[row + j] as f32;
            let d0 = phi[row_ip + j] as f32 - p;
            let d1 = phi[row + jp] as f32 - p;
            kinetic += d0 * d0 + d1 * d1;
            let p2 = p * p;
            mass += p2;
            quartic += p2 * p2;
        }
    }
    (0.5 * kinetic + 0.5 * m0_sq * mass + lambda * quartic) as f64
}

/// ∂S_E/∂φ_x = Σ_μ [2φ_x − φ_{x+μ̂} − φ_{x−μ̂}] + m₀² φ_x + 4λ φ_x³ per site,
/// double precision.
pub fn action_gradient(spec: &LatticeSpec, phi: &[f64], grad: &mut [f64]) {
    let l = spec.l;
    assert_eq!(phi.len(), spec.volume(), "field length mismatch");
    assert_eq!(grad.len(), spec.volume(), "gradient length mismatch");
    for i in 0..l {
        let ip = if i + 1 == l { 0 } else { i + 1 };
        let im = if i == 0 { l - 1 } else { i - 1 };
        for j in 0..l {
            let jp = if j + 1 == l { 0 } else { j + 1 };
            let jm = if j == 0 { l - 1 } else { j - 1 };
            let p = phi[i * l + j];
            let neighbors = phi[ip * l + j] + phi[im * l + j] + phi[i * l + jp] + phi[i * l + jm];
            grad[i * l + j] = (2.0 * DIMS as f64) * p - neighbors
                + spec.m0_sq * p
                + 4.0 * spec.lambda * p * p * p;
        }
    }
}

/// Single-precision gradient path, mirroring [`action_f32`].
pub fn action_gradient_f32(spec: &LatticeSpec, phi: &[f64], grad: &mut [f64]) {
    let l = spec.l;
    assert_eq!(phi.len(), spec.volume(), "field length mismatch");
    assert_eq!(grad.len(), spec.volume(), "gradient length mismatch");
    let m0_sq = spec.m0_sq as f32;
    let lambda = spec.lambda as f32;
    for i in 0..l {
        let ip = if i + 1 == l { 0 } else { i + 1 };
        let im = if i == 0 { l - 1 } else { i - 1 };
        for j in 0..l {
            let jp = if j + 1 == l { 0 } else { j + 1 };
            let jm = if j == 0 { l - 1 } else { j - 1 };
            let p = phi[i * l + j] as f32;
            let neighbors = phi[ip * l + j] as f32
                + phi[im * l + j] as f32
                + phi[i * l + jp] as f32
                + phi[i * l + jm] as f32;
            grad[i * l + j] = ((2.0 * DIMS as f32) * p - neighbors
                + m0_sq * p
                + 4.0 * lambda * p * p * p) as f64;
        }
    }
}

/// Lattice-averaged magnetization (1/V) Σ_x φ_x.
pub fn magnetization(phi: &[f64]) -> f64 {
    phi.iter().sum::<f64>() / phi.len() as f64
}

/// Tempered target p_β(φ) ∝ exp(−[U₀(φ) + β·S_E(φ)]) with the standard-normal
/// reference U₀(φ) = ½ Σ φ_x². β = 0 is the reference, β = 1 the physical
/// ensemble.
#[derive(Debug, Clone, Copy)]
pub struct TemperedTarget {
    pub spec: LatticeSpec,
    pub beta: f64,
    pub precision: Precision,
}

impl TemperedTarget {
    pub fn new(spec: LatticeSpec, beta: f64, precision: Precision) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(TemperedTarget {
            spec,
            beta,
            precision,
        })
    }

    /// Unnormalized log-density −[U₀(φ) + β·S_E(φ)].
    pub fn log_density(&self, phi: &[f64]) -> f64 {
        let u0 = match self.precision {
            Precision::Double => 0.5 * phi.iter().map(|p| p * p).sum::<f64>(),
            Precision::Single => {
                let s: f32 = phi
                    .iter()
                    .map(|p| {
                        let q = *p as f32;
                        q * q
                    })
                    .sum();
                0.5 * s as f64
            }
        };
        let s = match self.precision {
            Precision::Double => action(&self.spec, phi),
            Precision::Single => action_f32(&self.spec, phi),
        };
        -(u0 + self.beta * s)
    }

    /// Gradient of the log-density: −[φ + β·∇S_E(φ)].
    pub fn gradient(&self, phi: &[f64], grad: &mut [f64]) {
        match self.precision {
            Precision::Double => action_gradient(&self.spec, phi, grad),
            Precision::Single => action_gradient_f32(&self.spec, phi, grad),
        }
        for (g, p) in grad.iter_mut().zip(phi) {
            *g = -(p + self.beta * *g);
        }
    }

    /// Action of a configuration under the evaluation precision. This is the
    /// quantity the SMC reweighting uses.
    pub fn action_value(&self, phi: &[f64]) -> f64 {
        match self.precision {
            Precision::Double => action(&self.spec, phi),
            Precision::Single => action_f32(&self.spec, phi),
        }
    }
}

/// Alternative physical parameterization: couplings for
/// S_E(φ; κ, λ) = (κ/2) Σ_{x,μ} (φ_{x+μ̂}−φ_x)² + Σ_x [φ_x² + λ(φ_x²−1)²].
#[derive(Debug, Clone, Copy)]
pub struct KappaSpec {
    pub l: usize,
    pub kappa: f64,
    pub lambda: f64,
}

/// The κ-parameterized action. The nearest-neighbor coupling κ scales only
/// the kinetic term; the site potential is a unit double well.
pub fn kappa_action(spec: &KappaSpec, phi: &[f64]) -> f64 {
    let l = spec.l;
    assert_eq!(phi.len(), l * l, "field length mismatch");
    let mut kinetic = 0.0f64;
    let mut site = 0.0f64;
    for i in 0..l {
        let ip = if i + 1 == l { 0 } else { i + 1 };
        for j in 0..l {
            let jp = if j + 1 == l { 0 } else { j + 1 };
            let p = phi[i * l + j];
            let d0 = phi[ip * l + j] - p;
            let d1 = phi[i * l + jp] - p;
            kinetic += d0 * d0 + d1 * d1;
            let p2 = p * p;
            site += p2 + spec.lambda * (p2 - 1.0) * (p2 - 1.0);
        }
    }
    0.5 * spec.kappa * kinetic + site
}
