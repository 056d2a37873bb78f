//! Consistency fixed point for the mean-field gains.
//!
//! The population is summarized by `x̄ = [x̄¹; …; x̄ᴷ]` with
//!
//! ```text
//! ūₖ = C̄ₖ x̄ + D̄ₖ x⁰ + Ēₖ ȳ + r̄ₖ
//! dx̄ = (Ā x̄ + Ḡ x⁰ + L̄ ȳ + m̄) dt
//! ```
//!
//! Starting from zero gains, each iteration builds the major extended system,
//! solves `Π₀`, builds the minor extended systems on top of the major closed
//! loop, solves every `Πₖ`, and reads the new `C̄, D̄, Ē` off the minor
//! feedback blocks. Because `Πₖ` varies in time, so do the gains.

use std::ops::AddAssign;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block, set_block};
use crate::model::{build_extended_major, build_extended_minor, ExtendedMajorSystem, ExtendedMinorSystem, ModelSpec};
use crate::parallel::map_indexed;
use crate::riccati::{solve_backward_varying, RiccatiSolution};

/// Stacked gain trajectories, one matrix per grid point.
///
/// Shapes: `C̄` is `mK × nK`, `D̄` and `Ē` are `mK × n`, `Ā` is `nK × nK`,
/// `Ḡ` and `L̄` are `nK × n`. Row block `k` belongs to type `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTrajectory {
    pub cbar: Vec<DMatrix<f64>>,
    pub dbar: Vec<DMatrix<f64>>,
    pub ebar: Vec<DMatrix<f64>>,
    pub abar: Vec<DMatrix<f64>>,
    pub gbar: Vec<DMatrix<f64>>,
    pub lbar: Vec<DMatrix<f64>>,
}

impl GainTrajectory {
    /// Zero `C̄, D̄, Ē`; `Ā = diag(Aₖ)`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let (n, m, k) = (spec.dims.n, spec.dims.m, spec.types());
        let len = spec.grid.len();
        Self::from_cde(
            spec,
            vec![DMatrix::zeros(m * k, n * k); len],
            vec![DMatrix::zeros(m * k, n); len],
            vec![DMatrix::zeros(m * k, n); len],
        )
    }

    /// Completes `C̄, D̄, Ē` with `Āₖ = Aₖeₖ + BₖC̄ₖ`, `Ḡₖ = BₖD̄ₖ`, `L̄ₖ = BₖĒₖ`.
    pub fn from_cde(
        spec: &ModelSpec,
        cbar: Vec<DMatrix<f64>>,
        dbar: Vec<DMatrix<f64>>,
        ebar: Vec<DMatrix<f64>>,
    ) -> Self {
        let (n, m, kk) = (spec.dims.n, spec.dims.m, spec.types());
        let len = cbar.len();
        let mut abar = Vec::with_capacity(len);
        let mut gbar = Vec::with_capacity(len);
        let mut lbar = Vec::with_capacity(len);
        for i in 0..len {
            let mut a = DMatrix::zeros(n * kk, n * kk);
            let mut g = DMatrix::zeros(n * kk, n);
            let mut l = DMatrix::zeros(n * kk, n);
            for (k, t) in spec.minors.iter().enumerate() {
                let bk = &t.dynamics.b;
                let ck = cbar[i].rows(k * m, m);
                let mut row = bk * ck;
                row.view_mut((0, k * n), (n, n)).add_assign(&t.dynamics.a);
                set_block(&mut a, k * n, 0, &row);
                set_block(&mut g, k * n, 0, &(bk * dbar[i].rows(k * m, m)));
                set_block(&mut l, k * n, 0, &(bk * ebar[i].rows(k * m, m)));
            }
            abar.push(a);
            gbar.push(g);
            lbar.push(l);
        }
        Self { cbar, dbar, ebar, abar, gbar, lbar }
    }

    pub fn len(&self) -> usize {
        self.cbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cbar.is_empty()
    }

    pub fn check_shapes(&self, n: usize, m: usize, k: usize) -> Result<()> {
        let expect = [
            ("C̄", &self.cbar, (m * k, n * k)),
            ("D̄", &self.dbar, (m * k, n)),
            ("Ē", &self.ebar, (m * k, n)),
            ("Ā", &self.abar, (n * k, n * k)),
            ("Ḡ", &self.gbar, (n * k, n)),
            ("L̄", &self.lbar, (n * k, n)),
        ];
        for (what, traj, shape) in expect {
            if traj.len() != self.len() {
                return Err(Error::GridMismatch(format!("{what} has {} points, expected {}", traj.len(), self.len())));
            }
            if let Some(bad) = traj.iter().find(|x| x.shape() != shape) {
                return Err(Error::DimensionMismatch {
                    what: format!("mean-field gain {what}"),
                    expected: format!("{}x{}", shape.0, shape.1),
                    found: format!("{}x{}", bad.nrows(), bad.ncols()),
                });
            }
        }
        Ok(())
    }

    /// `max over grid points of max(‖ΔC̄‖_F, ‖ΔD̄‖_F, ‖ΔĒ‖_F)`.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut out: f64 = 0.0;
        for i in 0..self.len() {
            out = out
                .max((&self.cbar[i] - &other.cbar[i]).norm())
                .max((&self.dbar[i] - &other.dbar[i]).norm())
                .max((&self.ebar[i] - &other.ebar[i]).norm());
        }
        out
    }

    /// `(1 − w)·self + w·other` on `C̄, D̄, Ē`, with the rest rebuilt.
    pub fn blend(&self, other: &Self, w: f64, spec: &ModelSpec) -> Self {
        let mix = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            a.iter().zip(b).map(|(x, y)| x * (1.0 - w) + y * w).collect()
        };
        Self::from_cde(spec, mix(&self.cbar, &other.cbar), mix(&self.dbar, &other.dbar), mix(&self.ebar, &other.ebar))
    }
}

/// Damped Picard settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOptions {
    pub tol: f64,
    pub damping: f64,
    pub max_iter: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self { tol: 1e-8, damping: 0.5, max_iter: 100 }
    }
}

/// Converged gains together with the Riccati solutions and extended systems
/// they imply.
#[derive(Debug, Clone)]
pub struct MeanFieldGains {
    pub gains: GainTrajectory,
    pub major: ExtendedMajorSystem,
    pub minors: Vec<ExtendedMinorSystem>,
    pub pi0: RiccatiSolution,
    pub pik: Vec<RiccatiSolution>,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl MeanFieldGains {
    /// Builds extended systems and solves the Riccati equations implied by `gains`.
    pub fn assemble(spec: &ModelSpec, gains: GainTrajectory) -> Result<Self> {
        let major = build_extended_major(spec, &gains)?;
        let pi0 = solve_backward_varying(&major.a, &major.b, &major.q, &major.cross, &major.r, &major.g, &spec.grid)?;
        let minors: Vec<_> = map_indexed(spec.types(), |k| -> Result<_> {
            let sys = build_extended_minor(spec, k, &major, &pi0)?;
            let pi = solve_backward_varying(&sys.a, &sys.b, &sys.q, &sys.cross, &sys.r, &sys.g, &spec.grid)?;
            Ok((sys, pi))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let (minors, pik) = minors.into_iter().unzip();
        Ok(Self { gains, major, minors, pi0, pik, iterations: 0, residual: f64::NAN, residual_history: Vec::new() })
    }

    /// `Πₖ` block `(row, col)` at step `i`, blocks indexed `1..=4` over `[xⁱ; ȳ; x⁰; x̄]`.
    pub fn minor_block(&self, k: usize, i: usize, row: usize, col: usize) -> DMatrix<f64> {
        let n = self.major.fhat_input.ncols();
        let kk = self.pik.len();
        let span = |b: usize| match b {
            1 => (0, n),
            2 => (n, n),
            3 => (2 * n, n),
            4 => (3 * n, n * kk),
            _ => panic!("block index {b} out of range 1..=4"),
        };
        let (r0, rl) = span(row);
        let (c0, cl) = span(col);
        block(&self.pik[k].values[i], r0, c0, rl, cl)
    }

    /// `ℕₖ` row block (`1..=4`), an `· × m` matrix.
    pub fn minor_cross_block(&self, k: usize, row: usize) -> DMatrix<f64> {
        let n = self.major.fhat_input.ncols();
        let kk = self.pik.len();
        let cross = &self.minors[k].cross;
        let (r0, rl) = match row {
            1 => (0, n),
            2 => (n, n),
            3 => (2 * n, n),
            4 => (3 * n, n * kk),
            _ => panic!("block index {row} out of range 1..=4"),
        };
        block(cross, r0, 0, rl, cross.ncols())
    }

    /// Major feedback `K₀(tᵢ) = R₀⁻¹(ℕ₀ᵀ + 𝔹₀ᵀΠ₀)`, so `u⁰ = −K₀X⁰ − R₀⁻¹𝔹₀ᵀs⁰`.
    pub fn major_feedback(&self, i: usize) -> DMatrix<f64> {
        &self.major.r_inv * (self.major.cross.transpose() + self.major.b.transpose() * &self.pi0.values[i])
    }

    /// Minor feedback `Kₖ(tᵢ) = Rₖ⁻¹(ℕₖᵀ + 𝔹ₖᵀΠₖ)`.
    pub fn minor_feedback(&self, k: usize, i: usize) -> DMatrix<f64> {
        let sys = &self.minors[k];
        &sys.r_inv * (sys.cross.transpose() + sys.b.transpose() * &self.pik[k].values[i])
    }

    /// `C̄, D̄, Ē` read off the minor feedback blocks.
    pub fn regenerate(&self, spec: &ModelSpec) -> GainTrajectory {
        let (n, m, kk) = (spec.dims.n, spec.dims.m, spec.types());
        let len = spec.grid.len();
        let mut cbar = vec![DMatrix::zeros(m * kk, n * kk); len];
        let mut dbar = vec![DMatrix::zeros(m * kk, n); len];
        let mut ebar = vec![DMatrix::zeros(m * kk, n); len];
        for i in 0..len {
            for k in 0..kk {
                // −K = −R⁻¹[(ℕ₁ᵀ + BᵀΠ₁₁) | (ℕ₂ᵀ + BᵀΠ₁₂) | (ℕ₃ᵀ + BᵀΠ₁₃) | (ℕ₄ᵀ + BᵀΠ₁₄)]
                let gain = -self.minor_feedback(k, i);
                let mut c = gain.columns(3 * n, n * kk).into_owned();
                c.columns_mut(k * n, n).add_assign(&gain.columns(0, n));
                set_block(&mut cbar[i], k * m, 0, &c);
                set_block(&mut ebar[i], k * m, 0, &gain.columns(n, n).into_owned());
                set_block(&mut dbar[i], k * m, 0, &gain.columns(2 * n, n).into_owned());
            }
        }
        GainTrajectory::from_cde(spec, cbar, dbar, ebar)
    }

    /// Fixed-point residual: distance between the stored gains and the gains
    /// regenerated from them.
    pub fn fixed_point_residual(&self, spec: &ModelSpec) -> f64 {
        self.gains.distance(&self.regenerate(spec))
    }
}

pub fn solve_consistency(spec: &ModelSpec, opts: &ConsistencyOptions) -> Result<MeanFieldGains> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let mut gains = GainTrajectory::zeros(spec);
    let mut history = Vec::new();
    let mut growth = 0;
    for iter in 1..=opts.max_iter.max(1) {
        let mut current = MeanFieldGains::assemble(spec, gains)?;
        let fresh = current.regenerate(spec);
        let residual = current.gains.distance(&fresh);
        log::debug!("consistency iteration {iter}: residual {residual:.3e}");
        if let Some(&prev) = history.last() {
            growth = if residual > prev { growth + 1 } else { 0 };
        }
        history.push(residual);
        if !residual.is_finite() {
            return Err(Error::DivergenceDetected { iteration: iter, residual });
        }
        if residual < opts.tol {
            current.iterations = iter;
            current.residual = residual;
            current.residual_history = history;
            return Ok(current);
        }
        if growth >= 3 {
            return Err(Error::DivergenceDetected { iteration: iter, residual });
        }
        gains = current.gains.blend(&fresh, opts.damping, spec);
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: history.last().copied().unwrap_or(f64::NAN) })
}

/// Stability of `M₁ = diag(Aₖ − BₖRₖ⁻¹(ℕₖ,₁ᵀ + BₖᵀΠₖ,₁₁))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HurwitzReport {
    /// `M₁` at `t = 0`.
    pub m1: DMatrix<f64>,
    /// Largest real part among the eigenvalues of `M₁(0)`.
    pub max_real_eig: f64,
    /// Largest real part over every grid point.
    pub max_real_eig_over_grid: f64,
}

impl HurwitzReport {
    pub fn passed(&self) -> bool {
        self.max_real_eig < 0.0
    }
}

pub fn hurwitz_matrix(gains: &MeanFieldGains, spec: &ModelSpec, i: usize) -> DMatrix<f64> {
    let n = spec.dims.n;
    let kk = spec.types();
    let mut m1 = DMatrix::zeros(n * kk, n * kk);
    for (k, t) in spec.minors.iter().enumerate() {
        let sys = &gains.minors[k];
        let inner = gains.minor_cross_block(k, 1).transpose() + t.dynamics.b.transpose() * gains.minor_block(k, i, 1, 1);
        let mk = &t.dynamics.a - &t.dynamics.b * &sys.r_inv * inner;
        set_block(&mut m1, k * n, k * n, &mk);
    }
    m1
}

fn max_real_part(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn check_hurwitz(gains: &MeanFieldGains, spec: &ModelSpec) -> HurwitzReport {
    let m1 = hurwitz_matrix(gains, spec, 0);
    let max_real_eig = max_real_part(&m1);
    let max_real_eig_over_grid = (0..spec.grid.len())
        .map(|i| max_real_part(&hurwitz_matrix(gains, spec, i)))
        .fold(f64::NEG_INFINITY, f64::max);
    HurwitzReport { m1, max_real_eig, max_real_eig_over_grid }
}
