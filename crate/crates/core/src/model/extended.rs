//! Extended-state systems for the major agent and for each minor type.

use nalgebra::{DMatrix, DVector};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::linalg::{block_diag, leading_selector, set_block, spd_inverse};
use crate::meanfield::GainTrajectory;
use crate::riccati::RiccatiSolution;

/// `[π₁M¹, …, π_K Mᴷ]` for a matrix made of `K` column blocks of width `block`.
/// When every block is the same `M`, this is the Kronecker product `π ⊗ M`.
pub fn type_weighted(m: &DMatrix<f64>, fractions: &DVector<f64>, block: usize) -> Result<DMatrix<f64>> {
    let k = fractions.len();
    if m.ncols() != block * k {
        return Err(Error::DimensionMismatch {
            what: "type-blocked impact matrix".into(),
            expected: format!("{} columns", block * k),
            found: format!("{} columns", m.ncols()),
        });
    }
    let mut out = m.clone();
    for t in 0..k {
        out.columns_mut(t * block, block).scale_mut(fractions[t]);
    }
    Ok(out)
}

/// Major agent's extended system on `X⁰ = [ȳ; x⁰; x̄]`.
#[derive(Debug, Clone)]
pub struct ExtendedMajorSystem {
    /// `𝔸₀(tᵢ)` on every grid point (time-varying through the gains).
    pub a: Vec<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    /// `Σ₀ = diag(σ, σ₀, 0)`, acting on `[ŵ; w⁰; 0]`.
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub f_pi: DMatrix<f64>,
    pub h_pi: DMatrix<f64>,
    /// Maps `r̄` into `𝕄⁰`: `[F^π; 0; diag(Bₖ)]`.
    pub rbar_input: DMatrix<f64>,
    /// Maps `f̂` into `𝕄⁰`: `[Iₙ; 0; 0]`.
    pub fhat_input: DMatrix<f64>,
    deterministic: Vec<DVector<f64>>,
}

impl ExtendedMajorSystem {
    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    /// Deterministic part `[0; b₀(t); b̄(t)]` of `𝕄⁰`.
    pub fn deterministic_forcing(&self, step: usize) -> &DVector<f64> {
        &self.deterministic[step.min(self.deterministic.len() - 1)]
    }

    /// `𝕄⁰ₜ = [f̂ + F^π r̄; b₀; B̄ r̄ + b̄]`.
    pub fn forcing(&self, step: usize, fhat: &DVector<f64>, rbar: &DVector<f64>) -> DVector<f64> {
        self.deterministic_forcing(step) + &self.fhat_input * fhat + &self.rbar_input * rbar
    }

    /// `𝔸₀ − 𝔹₀R₀⁻¹ℕ₀ᵀ − 𝔹₀R₀⁻¹𝔹₀ᵀΠ₀`.
    pub fn closed_loop(&self, step: usize, pi0: &DMatrix<f64>) -> DMatrix<f64> {
        let br = &self.b * &self.r_inv;
        &self.a[step] - &br * self.cross.transpose() - &br * self.b.transpose() * pi0
    }

    /// `𝔹₀R₀⁻¹𝔹₀ᵀ`.
    pub fn control_gramian(&self) -> DMatrix<f64> {
        &self.b * &self.r_inv * self.b.transpose()
    }
}

fn r_inverse(what: &str, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_inverse(r).ok_or_else(|| Error::ConvexityViolation {
        check: format!("{what}.R > 0"),
        eigenvalue: crate::linalg::sym_eigenvalues(r).first().copied().unwrap_or(f64::NAN),
    })
}

pub fn build_extended_major(spec: &ModelSpec, gains: &GainTrajectory) -> Result<ExtendedMajorSystem> {
    let n = spec.dims.n;
    let m = spec.dims.m;
    let r = spec.dims.r;
    let k = spec.types();
    let d0 = spec.major_ext_dim();
    if gains.len() != spec.grid.len() {
        return Err(Error::GridMismatch(format!(
            "gain trajectory has {} points, grid has {}",
            gains.len(),
            spec.grid.len()
        )));
    }
    gains.check_shapes(n, m, k)?;

    let c = &spec.common;
    let f_pi = type_weighted(&c.f, &spec.population.type_fractions, m)?;
    let h_pi = type_weighted(&c.h, &spec.population.type_fractions, n)?;
    let major = &spec.major.dynamics;

    let a = (0..spec.grid.len())
        .map(|i| {
            let mut a0 = DMatrix::zeros(d0, d0);
            set_block(&mut a0, 0, 0, &(&f_pi * &gains.ebar[i]));
            set_block(&mut a0, 0, n, &(&f_pi * &gains.dbar[i] + &c.h0));
            set_block(&mut a0, 0, 2 * n, &(&f_pi * &gains.cbar[i] + &h_pi));
            set_block(&mut a0, n, n, &major.a);
            set_block(&mut a0, 2 * n, 0, &gains.lbar[i]);
            set_block(&mut a0, 2 * n, n, &gains.gbar[i]);
            set_block(&mut a0, 2 * n, 2 * n, &gains.abar[i]);
            a0
        })
        .collect();

    let mut b = DMatrix::zeros(d0, m);
    set_block(&mut b, 0, 0, &c.f0);
    set_block(&mut b, n, 0, &major.b);

    let sigma0 = spec.effective_sigma(&major.sigma);
    let mut sigma = DMatrix::zeros(d0, 2 * r + r * k);
    set_block(&mut sigma, 0, 0, &c.sigma);
    set_block(&mut sigma, n, r, &sigma0);

    let e = leading_selector(2 * n, d0);
    let cost = &spec.major.cost;
    let q = e.transpose() * &cost.q * &e;
    let g = e.transpose() * &cost.g * &e;
    let mut cross = DMatrix::zeros(d0, m);
    set_block(&mut cross, 0, 0, &cost.cross);

    let bbar = block_diag(&spec.minors.iter().map(|t| &t.dynamics.b).collect::<Vec<_>>());
    let mut rbar_input = DMatrix::zeros(d0, m * k);
    set_block(&mut rbar_input, 0, 0, &f_pi);
    set_block(&mut rbar_input, 2 * n, 0, &bbar);
    let mut fhat_input = DMatrix::zeros(d0, n);
    set_block(&mut fhat_input, 0, 0, &DMatrix::identity(n, n));

    let deterministic = (0..spec.grid.len())
        .map(|i| {
            let mut v = DVector::zeros(d0);
            v.rows_mut(n, n).copy_from(major.drift.at_step(i));
            v.rows_mut(2 * n, n * k).copy_from(&spec.stacked_minor_drift(i));
            v
        })
        .collect();

    Ok(ExtendedMajorSystem {
        a,
        b,
        sigma,
        q,
        cross,
        g,
        r: cost.r.clone(),
        r_inv: r_inverse("major", &cost.r)?,
        f_pi,
        h_pi,
        rbar_input,
        fhat_input,
        deterministic,
    })
}

/// Minor type `k`'s extended system on `Xⁱ = [xⁱ; ȳ; x⁰; x̄]`.
#[derive(Debug, Clone)]
pub struct ExtendedMinorSystem {
    pub k: usize,
    /// `𝔸ₖ(tᵢ) = diag(Aₖ, 𝔸₀ − 𝔹₀R₀⁻¹ℕ₀ᵀ − 𝔹₀R₀⁻¹𝔹₀ᵀΠ₀(tᵢ))`.
    pub a: Vec<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    /// `Σₖ = diag(σₖ, Σ₀)`.
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    drift: Vec<DVector<f64>>,
}

impl ExtendedMinorSystem {
    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    /// `𝕄ᵏₜ = [bₖ(t); 𝕄⁰ₜ − 𝔹₀R₀⁻¹𝔹₀ᵀs⁰ₜ]`.
    pub fn forcing(&self, step: usize, major_forcing: &DVector<f64>, major_gramian: &DMatrix<f64>, s0: &DVector<f64>) -> DVector<f64> {
        let bk = &self.drift[step.min(self.drift.len() - 1)];
        let n = bk.len();
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, n).copy_from(bk);
        out.rows_mut(n, major_forcing.len()).copy_from(&(major_forcing - major_gramian * s0));
        out
    }

    pub fn closed_loop(&self, step: usize, pik: &DMatrix<f64>) -> DMatrix<f64> {
        let br = &self.b * &self.r_inv;
        &self.a[step] - &br * self.cross.transpose() - &br * self.b.transpose() * pik
    }
}

pub fn build_extended_minor(
    spec: &ModelSpec,
    k: usize,
    major: &ExtendedMajorSystem,
    major_riccati: &RiccatiSolution,
) -> Result<ExtendedMinorSystem> {
    let n = spec.dims.n;
    let m = spec.dims.m;
    let r = spec.dims.r;
    let dk = spec.minor_ext_dim();
    if major_riccati.grid != spec.grid || major_riccati.values.len() != spec.grid.len() {
        return Err(Error::GridMismatch("major Riccati solution is not on the model grid".into()));
    }
    if major.a.len() != spec.grid.len() {
        return Err(Error::GridMismatch("major extended system is not on the model grid".into()));
    }
    let t = spec
        .minors
        .get(k)
        .ok_or_else(|| Error::InvalidModel(format!("minor type {k} does not exist")))?;

    let a = (0..spec.grid.len())
        .map(|i| block_diag(&[&t.dynamics.a, &major.closed_loop(i, &major_riccati.values[i])]))
        .collect();
    let mut b = DMatrix::zeros(dk, m);
    set_block(&mut b, 0, 0, &t.dynamics.b);
    let sigma_k = spec.effective_sigma(&t.dynamics.sigma);
    let mut sigma = DMatrix::zeros(dk, r + major.sigma.ncols());
    set_block(&mut sigma, 0, 0, &sigma_k);
    set_block(&mut sigma, n, r, &major.sigma);

    let e = leading_selector(2 * n, dk);
    let q = e.transpose() * &t.cost.q * &e;
    let g = e.transpose() * &t.cost.g * &e;
    let mut cross = DMatrix::zeros(dk, m);
    set_block(&mut cross, 0, 0, &t.cost.cross);
    let drift = (0..spec.grid.len()).map(|i| t.dynamics.drift.at_step(i).clone()).collect();

    Ok(ExtendedMinorSystem {
        k,
        a,
        b,
        sigma,
        q,
        cross,
        g,
        r: t.cost.r.clone(),
        r_inv: r_inverse(&format!("minor[{k}]"), &t.cost.r)?,
        drift,
    })
}

pub fn build_extended_minors(
    spec: &ModelSpec,
    major: &ExtendedMajorSystem,
    major_riccati: &RiccatiSolution,
) -> Result<Vec<ExtendedMinorSystem>> {
    (0..spec.types())
        .map(|k| build_extended_minor(spec, k, major, major_riccati))
        .collect()
}
