//! Problem definition: dynamics, costs, latent chain, common process and
//! population, plus validation and the extended-state systems.
//!
//! Ordering conventions used throughout the crate:
//!
//! * major cost vector `z⁰ = [y; x⁰]`, minor cost vector `zⁱ = [xⁱ; y]`;
//! * major extended state `X⁰ = [ȳ; x⁰; x̄¹ … x̄ᴷ]`, dimension `(2+K)n`;
//! * minor extended state `Xⁱ = [xⁱ; ȳ; x⁰; x̄¹ … x̄ᴷ]`, dimension `(3+K)n`.
//!
//! The common process lives in the state space, so `y, yᴸ ∈ ℝⁿ`.

mod config;
mod extended;
mod scalar;
mod validate;

use nalgebra::{DMatrix, DVector};

use crate::grid::TimeGrid;

pub use config::load_model;
pub use extended::{
    build_extended_major, build_extended_minor, build_extended_minors, type_weighted,
    ExtendedMajorSystem, ExtendedMinorSystem,
};
pub use scalar::{ScalarAgent, ScalarParams};
pub use validate::{assess, check_dimensions, validate, AssumptionCheck, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension, shared by every agent and by the common process.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Wiener dimension of each noise source.
    pub r: usize,
}

/// Deterministic function of time: either constant or sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFunction {
    Constant(DVector<f64>),
    Sampled(Vec<DVector<f64>>),
}

impl TimeFunction {
    pub fn zeros(n: usize) -> Self {
        TimeFunction::Constant(DVector::zeros(n))
    }

    pub fn at_step(&self, i: usize) -> &DVector<f64> {
        match self {
            TimeFunction::Constant(v) => v,
            TimeFunction::Sampled(vs) => &vs[i.min(vs.len() - 1)],
        }
    }

    /// Linear interpolation between grid samples.
    pub fn at_time(&self, grid: &TimeGrid, t: f64) -> DVector<f64> {
        match self {
            TimeFunction::Constant(v) => v.clone(),
            TimeFunction::Sampled(vs) => {
                let x = (t / grid.dt()).clamp(0.0, grid.steps as f64);
                let i = (x.floor() as usize).min(grid.steps - 1);
                let w = x - i as f64;
                crate::linalg::lerp_vec(&vs[i], &vs[i + 1], w)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TimeFunction::Constant(v) => v.len(),
            TimeFunction::Sampled(vs) => vs.first().map_or(0, |v| v.len()),
        }
    }
}

/// `dx = [A x + B u + b(t)] dt + σ dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub drift: TimeFunction,
    pub sigma: DMatrix<f64>,
}

pub type MajorDynamics = AgentDynamics;
pub type MinorTypeDynamics = AgentDynamics;

/// Quadratic cost `½E[zᵀ_T G z_T + ∫ zᵀQz + 2zᵀNu + uᵀRu]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Independent Gaussian initial law, per component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInit {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl GaussianInit {
    pub fn zero(n: usize) -> Self {
        Self { mean: DVector::zeros(n), std: DVector::zeros(n) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub dynamics: AgentDynamics,
    pub cost: CostWeights,
    pub initial: GaussianInit,
}

/// Finite-state latent chain. `rates[(i, j)]` is the jump intensity `i → j`
/// (zero diagonal); `states[j]` is the drift-relevant value `γⱼ ∈ ℝⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChainSpec {
    pub states: Vec<DVector<f64>>,
    pub rates: DMatrix<f64>,
    pub initial: DVector<f64>,
}

impl LatentChainSpec {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        (0..self.len()).filter(|&j| j != i).map(|j| self.rates[(i, j)]).sum()
    }

    /// Generator with rows summing to zero.
    pub fn generator(&self) -> DMatrix<f64> {
        let mut q = self.rates.clone();
        for i in 0..self.len() {
            q[(i, i)] = -self.exit_rate(i);
        }
        q
    }

    /// `n × M` matrix whose columns are the chain values.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.states.first().map_or(0, |s| s.len());
        DMatrix::from_fn(n, self.len(), |r, c| self.states[c][r])
    }
}

/// Family for `f(t, yᴸ, γⱼ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftFamily {
    /// `f = γⱼ`.
    Constant,
    /// `f = γⱼ + Λⱼ yᴸ`.
    Affine { slopes: Vec<DMatrix<f64>> },
    /// `f(tᵢ, ·, γⱼ) = values[j][i]`, independent of `yᴸ`.
    Sampled { values: Vec<Vec<DVector<f64>>> },
}

/// `dy = dyᴸ + (F u⁽ᴺ⁾ + F₀u⁰ + H x⁽ᴺ⁾ + H₀x⁰) dt`, `dyᴸ = f(t, yᴸ, Γ) dt + σ dw`.
///
/// `f` is `n × mK` and `h` is `n × nK`, one column block per minor type; the
/// limiting impacts weight block `k` by the type fraction `πₖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonProcessSpec {
    pub drift: DriftFamily,
    pub sigma: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub f0: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h0: DMatrix<f64>,
    pub y0: DVector<f64>,
}

impl CommonProcessSpec {
    /// Writes `f(tᵢ, yᴸ, γⱼ)` into `out`.
    pub fn drift_into(&self, chain: &LatentChainSpec, step: usize, yl: &[f64], j: usize, out: &mut [f64]) {
        match &self.drift {
            DriftFamily::Constant => out.copy_from_slice(chain.states[j].as_slice()),
            DriftFamily::Affine { slopes } => {
                out.copy_from_slice(chain.states[j].as_slice());
                crate::linalg::gemv_acc(out, 1.0, &slopes[j], yl);
            }
            DriftFamily::Sampled { values } => {
                let vs = &values[j];
                out.copy_from_slice(vs[step.min(vs.len() - 1)].as_slice());
            }
        }
    }

    pub fn drift(&self, chain: &LatentChainSpec, step: usize, yl: &DVector<f64>, j: usize) -> DVector<f64> {
        let mut out = DVector::zeros(yl.len());
        self.drift_into(chain, step, yl.as_slice(), j, out.as_mut_slice());
        out
    }

    /// True when `f` does not depend on `yᴸ`.
    pub fn drift_ignores_level(&self) -> bool {
        match &self.drift {
            DriftFamily::Affine { slopes } => slopes.iter().all(|s| s.iter().all(|&x| x == 0.0)),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub type_fractions: DVector<f64>,
    pub n_schedule: Vec<usize>,
    /// Optional covariance of the agents' Wiener processes, applied as
    /// `σ ↦ σ L` with `L` its Cholesky factor. `None` means standard noise.
    pub wiener_cov: Option<DMatrix<f64>>,
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub major: AgentSpec,
    pub minors: Vec<AgentSpec>,
    pub chain: LatentChainSpec,
    pub common: CommonProcessSpec,
    pub population: PopulationSpec,
    /// Lower bound `δ` in `R ≻ δI`.
    pub delta: f64,
}

impl ModelSpec {
    pub fn types(&self) -> usize {
        self.minors.len()
    }

    pub fn major_ext_dim(&self) -> usize {
        (2 + self.types()) * self.dims.n
    }

    pub fn minor_ext_dim(&self) -> usize {
        (3 + self.types()) * self.dims.n
    }

    /// Filtering is only meaningful with at least two chain states.
    pub fn filtering_enabled(&self) -> bool {
        self.chain.len() > 1
    }

    /// Agent noise loading after the optional covariance scaling.
    pub fn effective_sigma(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.population.wiener_cov {
            Some(cov) => match cov.clone().cholesky() {
                Some(ch) => sigma * ch.l(),
                None => sigma.clone(),
            },
            None => sigma.clone(),
        }
    }

    /// Stacked `b̄(t) = [b₁(t); …; b_K(t)]`.
    pub fn stacked_minor_drift(&self, step: usize) -> DVector<f64> {
        let n = self.dims.n;
        let mut out = DVector::zeros(n * self.types());
        for (k, t) in self.minors.iter().enumerate() {
            out.rows_mut(k * n, n).copy_from(t.dynamics.drift.at_step(step));
        }
        out
    }

    pub fn from_toml_str(text: &str) -> crate::Result<Self> {
        config::parse_model(text)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> crate::Result<Self> {
        load_model(path)
    }
}
