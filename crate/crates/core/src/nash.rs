//! ε-Nash gap estimation by derivative-free search over linear unilateral deviations.
//!
//! The deviating agent plays `u* + ΔL φ + Δm(t)`, where `φ` is `[xⁱ; y; x⁰; x⁽ᴺ⁾]`
//! for a minor agent and `[x⁰; y; x⁽ᴺ⁾]` for the major agent, and `Δm` is
//! piecewise constant on a coarse sub-grid. Every candidate is evaluated on
//! the same training paths, and the winner is re-scored against the baseline
//! on fresh paths with a paired estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::MeanFieldGains;
use crate::model::ModelSpec;
use crate::offset::OffsetEstimator;
use crate::rng::derive_seed;
use crate::sim::{simulate_finite_with, Deviation, SimOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    Major,
    Minor(usize),
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentRole::Major => write!(f, "major"),
            AgentRole::Minor(k) => write!(f, "minor{k}"),
        }
    }
}

impl FromStr for AgentRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "major" {
            return Ok(AgentRole::Major);
        }
        s.strip_prefix("minor")
            .and_then(|k| k.parse().ok())
            .map(AgentRole::Minor)
            .ok_or_else(|| Error::Config(format!("unknown agent role `{s}` (expected `major` or `minorK`)")))
    }
}

/// `ΔL φ + Δm(t)` added to the equilibrium control of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationPolicy {
    pub role: AgentRole,
    /// `m × features`.
    pub gain: DMatrix<f64>,
    /// One value per piece of the coarse sub-grid.
    pub offsets: Vec<DVector<f64>>,
}

impl DeviationPolicy {
    pub fn zero(role: AgentRole, n: usize, m: usize, pieces: usize) -> Self {
        let features = match role {
            AgentRole::Major => 3 * n,
            AgentRole::Minor(_) => 4 * n,
        };
        Self { role, gain: DMatrix::zeros(m, features), offsets: vec![DVector::zeros(m); pieces.max(1)] }
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.offsets.iter().map(|o| o.len()).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.gain.iter().copied().collect();
        for o in &self.offsets {
            p.extend(o.iter());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let g = self.gain.len();
        self.gain.as_mut_slice().copy_from_slice(&p[..g]);
        let mut at = g;
        for o in &mut self.offsets {
            let l = o.len();
            o.as_mut_slice().copy_from_slice(&p[at..at + l]);
            at += l;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.gain.iter().all(|&v| v == 0.0) && self.offsets.iter().all(|o| o.iter().all(|&v| v == 0.0))
    }

    pub fn piece(&self, step: usize, steps: usize) -> usize {
        let pieces = self.offsets.len();
        if steps == 0 {
            return 0;
        }
        (step * pieces / steps).min(pieces - 1)
    }

    /// Writes `ΔL φ + Δm(tᵢ)` into `out`.
    pub fn apply_into(&self, step: usize, steps: usize, features: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.offsets[self.piece(step, steps)].as_slice());
        crate::linalg::gemv_acc(out, 1.0, &self.gain, features);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapOptions {
    /// Paths per candidate evaluation, and for the validation run.
    pub paths: usize,
    /// Maximum candidate evaluations in the search.
    pub budget: usize,
    pub pieces: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub seed: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self { paths: 400, budget: 60, pieces: 4, initial_step: 0.25, min_step: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub n: usize,
    pub role: AgentRole,
    /// Validation mean cost under the equilibrium law.
    pub baseline: f64,
    pub baseline_stderr: f64,
    /// Validation mean cost under the best deviation found.
    pub best: f64,
    pub best_stderr: f64,
    /// `max(0, mean(baseline − best))` over paired validation paths.
    pub gap: f64,
    /// Standard error of the paired mean difference.
    pub stderr: f64,
    /// Unclamped paired mean difference.
    pub raw_gap: f64,
    /// Training-path improvement found by the search.
    pub training_gain: f64,
    pub evals: usize,
    pub budget_exhausted: bool,
    pub best_params: Vec<f64>,
}

fn tagged_index(role: AgentRole) -> usize {
    match role {
        AgentRole::Major => 0,
        AgentRole::Minor(_) => 1,
    }
}

/// Per-path realized cost of the tagged agent (major, or minor agent 0).
#[allow(clippy::too_many_arguments)]
pub fn tagged_costs(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    population: usize,
    role: AgentRole,
    policy: &DeviationPolicy,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let tagged_type = match role {
        AgentRole::Major => None,
        AgentRole::Minor(k) => Some(k),
    };
    let opts = SimOptions { paths, seed, record: false, tagged_type };
    let dev = Deviation { role, policy };
    let out = simulate_finite_with(spec, mf, est, population, &opts, Some(dev))?;
    let idx = tagged_index(role);
    Ok(out.report.records.iter().filter(|r| r.agent == idx).map(|r| r.total).collect())
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

/// Searches for a profitable deviation of `role` in an `N`-agent population.
///
/// The returned gap is a lower bound on the true one. Running out of budget
/// is reported through `budget_exhausted` rather than as an error.
pub fn estimate_gap(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    population: usize,
    role: AgentRole,
    opts: &GapOptions,
) -> Result<GapEstimate> {
    if let AgentRole::Minor(k) = role {
        if k >= spec.types() {
            return Err(Error::Config(format!("minor type {k} does not exist")));
        }
    }
    if opts.paths < 2 {
        return Err(Error::Config("gap estimation needs at least 2 paths".into()));
    }
    let train_seed = derive_seed(opts.seed, 2 * population as u64);
    let valid_seed = derive_seed(opts.seed, 2 * population as u64 + 1);
    let mut policy = DeviationPolicy::zero(role, spec.dims.n, spec.dims.m, opts.pieces);
    let eval = |p: &DeviationPolicy| -> Result<f64> {
        let c = tagged_costs(spec, mf, est, population, role, p, opts.paths, train_seed)?;
        Ok(c.iter().sum::<f64>() / c.len() as f64)
    };

    let base_train = eval(&policy)?;
    let mut evals = 1;
    let mut theta = policy.params();
    let mut best = base_train;
    let mut step = opts.initial_step;
    let mut budget_exhausted = false;
    'search: while step >= opts.min_step {
        let mut improved = false;
        for j in 0..theta.len() {
            for dir in [1.0, -1.0] {
                if evals >= opts.budget {
                    budget_exhausted = true;
                    break 'search;
                }
                let mut cand = theta.clone();
                cand[j] += dir * step;
                policy.set_params(&cand);
                let c = match eval(&policy) {
                    Ok(c) => c,
                    Err(Error::UnstableTrajectory { .. }) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                evals += 1;
                if c < best {
                    best = c;
                    theta = cand;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    policy.set_params(&theta);
    log::debug!("gap search N={population} {role}: {evals} evals, training gain {}", base_train - best);

    let zero = DeviationPolicy::zero(role, spec.dims.n, spec.dims.m, opts.pieces);
    let base = tagged_costs(spec, mf, est, population, role, &zero, opts.paths, valid_seed)?;
    let dev = if policy.is_zero() {
        base.clone()
    } else {
        tagged_costs(spec, mf, est, population, role, &policy, opts.paths, valid_seed)?
    };
    let diffs: Vec<f64> = base.iter().zip(&dev).map(|(b, d)| b - d).collect();
    let (raw_gap, stderr) = mean_stderr(&diffs);
    let (baseline, baseline_stderr) = mean_stderr(&base);
    let (best_cost, best_stderr) = mean_stderr(&dev);
    Ok(GapEstimate {
        n: population,
        role,
        baseline,
        baseline_stderr,
        best: best_cost,
        best_stderr,
        gap: raw_gap.max(0.0),
        stderr,
        raw_gap,
        training_gain: base_train - best,
        evals,
        budget_exhausted,
        best_params: theta,
    })
}

/// [`estimate_gap`] over a population schedule with one master seed.
pub fn gap_curve(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    schedule: &[usize],
    role: AgentRole,
    opts: &GapOptions,
) -> Result<Vec<GapEstimate>> {
    schedule.iter().map(|&n| estimate_gap(spec, mf, est, n, role, opts)).collect()
}
