//! Offset BSDEs by regression Monte Carlo.
//!
//! The joint offset `S = (s⁰, s̄¹, …, s̄ᴷ)` solves the linear BSDE
//!
//! ```text
//! −dS = (𝒜(t) S + c(t) + P(t) f̂ₜ) dt − q dŴ,    S_T = 0
//! ```
//!
//! where `s⁰` couples to `s̄ᵏ` through `r̄ₖ = −Rₖ⁻¹𝔹ₖᵀs̄ᵏ` inside `𝕄⁰`, and every
//! `s̄ᵏ` couples back through `𝕄ᵏ`. On each step
//!
//! ```text
//! Sᵢ = E[Φᵢ (Sᵢ₊₁ + ½Δt gᵢ₊₁) | 𝓕ᵢ] + ½Δt gᵢ,    g = c + P f̂
//! ```
//!
//! with `Φᵢ` the homogeneous propagator over `[tᵢ, tᵢ₊₁]` (one RK4 step), and
//! the conditional expectation is a least-squares projection on polynomials in
//! `(yᴸ, π¹, …, π^{M−1})`. The representative minor offset is taken equal to `s̄ᵏ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::latent::{simulate_chain, simulate_latent};
use crate::linalg::set_block;
use crate::meanfield::MeanFieldGains;
use crate::model::ModelSpec;
use crate::parallel::map_indexed;
use crate::rng::{derive_seed, stream, Stream};
use crate::wonham::WonhamFilter;

/// Linear structure of the joint offset equation on the grid.
#[derive(Debug, Clone)]
pub struct OffsetSystem {
    pub d0: usize,
    pub dk: usize,
    pub types: usize,
    /// `𝒜(tᵢ)`.
    pub a: Vec<DMatrix<f64>>,
    /// `c(tᵢ)`.
    pub c: Vec<DVector<f64>>,
    /// `P(tᵢ)`, multiplying `f̂`.
    pub p: Vec<DMatrix<f64>>,
    /// `Φᵢ`, mapping `S(tᵢ₊₁)` to `S(tᵢ)` for the homogeneous equation.
    pub propagators: Vec<DMatrix<f64>>,
    pub dt: f64,
}

impl OffsetSystem {
    pub fn dim(&self) -> usize {
        self.d0 + self.types * self.dk
    }

    /// `g = c + P f̂` written into `out`.
    pub fn forcing_into(&self, i: usize, fhat: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.c[i].as_slice());
        crate::linalg::gemv_acc(out, 1.0, &self.p[i], fhat);
    }
}

/// Assembles `𝒜`, `c`, `P` and the step propagators from converged gains.
pub fn build_offset_system(spec: &ModelSpec, mf: &MeanFieldGains) -> OffsetSystem {
    let n = spec.dims.n;
    let kk = spec.types();
    let major = &mf.major;
    let d0 = major.dim();
    let dk = spec.minor_ext_dim();
    let dim = d0 + kk * dk;
    let gram0 = major.control_gramian();
    let mut e_low = DMatrix::zeros(dk, d0);
    set_block(&mut e_low, n, 0, &DMatrix::identity(d0, d0));

    // U_k maps s̄ᵏ into 𝕄⁰ through r̄ₖ
    let m = spec.dims.m;
    let u: Vec<DMatrix<f64>> = (0..kk)
        .map(|k| {
            let sys = &mf.minors[k];
            let j = -(&sys.r_inv * sys.b.transpose());
            major.rbar_input.columns(k * m, m) * j
        })
        .collect();

    let mut a = Vec::with_capacity(spec.grid.len());
    let mut c = Vec::with_capacity(spec.grid.len());
    let mut p = Vec::with_capacity(spec.grid.len());
    for i in 0..spec.grid.len() {
        let pi0 = &mf.pi0.values[i];
        let mut ai = DMatrix::zeros(dim, dim);
        set_block(&mut ai, 0, 0, &major.closed_loop(i, pi0).transpose());
        for (k, uk) in u.iter().enumerate() {
            set_block(&mut ai, 0, d0 + k * dk, &(pi0 * uk));
        }
        let d = major.deterministic_forcing(i);
        let mut ci = DVector::zeros(dim);
        ci.rows_mut(0, d0).copy_from(&(pi0 * d));
        let mut pi_ = DMatrix::zeros(dim, n);
        set_block(&mut pi_, 0, 0, &(pi0 * &major.fhat_input));
        for k in 0..kk {
            let sys = &mf.minors[k];
            let pik = &mf.pik[k].values[i];
            let row = d0 + k * dk;
            let pe = pik * &e_low;
            set_block(&mut ai, row, 0, &(-(&pe * &gram0)));
            for (l, ul) in u.iter().enumerate() {
                let mut blk = &pe * ul;
                if l == k {
                    blk += sys.closed_loop(i, pik).transpose();
                }
                set_block(&mut ai, row, d0 + l * dk, &blk);
            }
            let zero = DVector::zeros(d0);
            let mk = sys.forcing(i, d, &gram0, &zero);
            ci.rows_mut(row, dk).copy_from(&(pik * mk));
            set_block(&mut pi_, row, 0, &(&pe * &major.fhat_input));
        }
        a.push(ai);
        c.push(ci);
        p.push(pi_);
    }

    let dt = spec.grid.dt();
    let id = DMatrix::<f64>::identity(dim, dim);
    let propagators = (0..spec.grid.steps)
        .map(|i| {
            let mid = (&a[i] + &a[i + 1]) * 0.5;
            let k1 = a[i + 1].clone();
            let k2 = &mid * (&id + &k1 * (0.5 * dt));
            let k3 = &mid * (&id + &k2 * (0.5 * dt));
            let k4 = &a[i] * (&id + &k3 * dt);
            &id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        })
        .collect();

    OffsetSystem { d0, dk, types: kk, a, c, p, propagators, dt }
}

/// Polynomial features of `(yᴸ, π¹, …, π^{M−1})` up to a total degree,
/// excluding the constant (the intercept is handled by the regression).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basis {
    pub n: usize,
    pub states: usize,
    pub degree: usize,
    /// One exponent vector per feature over the raw variables.
    pub exponents: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(n: usize, states: usize, degree: usize) -> Self {
        let vars = n + states.saturating_sub(1);
        let mut exponents = Vec::new();
        for total in 1..=degree {
            let mut current = vec![0u32; vars];
            push_monomials(&mut exponents, &mut current, 0, total as u32);
        }
        Self { n, states, degree, exponents }
    }

    pub fn raw_dim(&self) -> usize {
        self.n + self.states.saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Raw variables `(yᴸ, π¹, …, π^{M−1})`.
    pub fn raw_into(&self, yl: &[f64], pi: &[f64], out: &mut [f64]) {
        out[..self.n].copy_from_slice(yl);
        out[self.n..].copy_from_slice(&pi[..self.states.saturating_sub(1)]);
    }

    pub fn features_into(&self, raw: &[f64], out: &mut [f64]) {
        for (f, e) in out.iter_mut().zip(&self.exponents) {
            *f = e.iter().zip(raw).filter(|(&p, _)| p > 0).map(|(&p, &x)| x.powi(p as i32)).product();
        }
    }

    pub fn describe(&self) -> Vec<String> {
        let names: Vec<String> = (0..self.n)
            .map(|c| format!("yl{c}"))
            .chain((0..self.states.saturating_sub(1)).map(|j| format!("pi{j}")))
            .collect();
        self.exponents
            .iter()
            .map(|e| {
                e.iter()
                    .zip(&names)
                    .filter(|(&p, _)| p > 0)
                    .map(|(&p, name)| if p == 1 { name.clone() } else { format!("{name}^{p}") })
                    .collect::<Vec<_>>()
                    .join("*")
            })
            .collect()
    }
}

fn push_monomials(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, var: usize, left: u32) {
    if var + 1 == current.len() {
        current[var] = left;
        out.push(current.clone());
        current[var] = 0;
        return;
    }
    if current.is_empty() {
        return;
    }
    for p in (0..=left).rev() {
        current[var] = p;
        push_monomials(out, current, var + 1, left - p);
    }
    current[var] = 0;
}

/// Fitted conditional expectation on one grid slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    /// Indices into the basis of the non-constant features kept on this slice.
    pub active: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Row-major `(1 + active) × dim`; row 0 is the intercept.
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetOptions {
    pub paths: usize,
    pub degree: usize,
    pub seed: u64,
    /// Fail on collinear features instead of dropping them.
    pub strict_rank: bool,
}

impl Default for OffsetOptions {
    fn default() -> Self {
        Self { paths: 10_000, degree: 2, seed: 0, strict_rank: false }
    }
}

/// Regression estimator for `S(tᵢ)` as a function of `(yᴸ, π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimator {
    pub version: u32,
    pub grid: TimeGrid,
    pub basis: Basis,
    pub d0: usize,
    pub dk: usize,
    pub types: usize,
    pub paths: usize,
    pub seed: u64,
    pub slices: Vec<SliceFit>,
    /// Monte Carlo standard error of each component of `S(0)`.
    pub s0_stderr: Vec<f64>,
}

/// `s⁰` and `s̄¹…s̄ᴷ` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetValue {
    pub s0: DVector<f64>,
    pub sbar: Vec<DVector<f64>>,
}

pub const ESTIMATOR_VERSION: u32 = 1;

impl OffsetEstimator {
    pub fn dim(&self) -> usize {
        self.d0 + self.types * self.dk
    }

    /// `S(tᵢ)` from raw variables, written into `out`; `scratch` holds basis values.
    pub fn evaluate_raw(&self, step: usize, raw: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let dim = self.dim();
        if step >= self.grid.steps {
            out.iter_mut().for_each(|x| *x = 0.0);
            return;
        }
        let fit = &self.slices[step];
        self.basis.features_into(raw, scratch);
        out.copy_from_slice(&fit.coeffs[..dim]);
        for (a, &j) in fit.active.iter().enumerate() {
            let z = (scratch[j] - fit.mean[a]) / fit.scale[a];
            let row = &fit.coeffs[(a + 1) * dim..(a + 2) * dim];
            for (o, &c) in out.iter_mut().zip(row) {
                *o += c * z;
            }
        }
    }

    pub fn evaluate_step(&self, step: usize, yl: &[f64], pi: &[f64]) -> DVector<f64> {
        let mut raw = vec![0.0; self.basis.raw_dim()];
        self.basis.raw_into(yl, pi, &mut raw);
        let mut scratch = vec![0.0; self.basis.len()];
        let mut out = DVector::zeros(self.dim());
        self.evaluate_raw(step, &raw, &mut scratch, out.as_mut_slice());
        out
    }

    pub fn split(&self, s: &DVector<f64>) -> OffsetValue {
        OffsetValue {
            s0: s.rows(0, self.d0).into_owned(),
            sbar: (0..self.types).map(|k| s.rows(self.d0 + k * self.dk, self.dk).into_owned()).collect(),
        }
    }

    /// Evaluation at a grid time; `OffGrid` otherwise.
    pub fn evaluate(&self, t: f64, yl: &[f64], pi: &[f64]) -> Result<OffsetValue> {
        let step = self.grid.index_of(t)?;
        Ok(self.split(&self.evaluate_step(step, yl, pi)))
    }

    /// Identically zero offsets (no stochastic or deterministic forcing).
    pub fn zero(spec: &ModelSpec, degree: usize) -> Self {
        let d0 = spec.major_ext_dim();
        let dk = spec.minor_ext_dim();
        let dim = d0 + spec.types() * dk;
        Self {
            version: ESTIMATOR_VERSION,
            grid: spec.grid,
            basis: Basis::new(spec.dims.n, spec.chain.len(), degree),
            d0,
            dk,
            types: spec.types(),
            paths: 0,
            seed: 0,
            slices: (0..spec.grid.steps)
                .map(|_| SliceFit { active: vec![], mean: vec![], scale: vec![], coeffs: vec![0.0; dim] })
                .collect(),
            s0_stderr: vec![0.0; dim],
        }
    }

    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<()> {
        if self.grid != spec.grid || self.slices.len() != spec.grid.steps {
            return Err(Error::GridMismatch("offset estimator was fitted on a different grid".into()));
        }
        if self.d0 != spec.major_ext_dim() || self.dk != spec.minor_ext_dim() || self.types != spec.types() {
            return Err(Error::DimensionMismatch {
                what: "offset estimator".into(),
                expected: format!("d0={} dk={} K={}", spec.major_ext_dim(), spec.minor_ext_dim(), spec.types()),
                found: format!("d0={} dk={} K={}", self.d0, self.dk, self.types),
            });
        }
        if self.basis.n != spec.dims.n || self.basis.states != spec.chain.len() {
            return Err(Error::DimensionMismatch {
                what: "offset basis".into(),
                expected: format!("n={} M={}", spec.dims.n, spec.chain.len()),
                found: format!("n={} M={}", self.basis.n, self.basis.states),
            });
        }
        Ok(())
    }
}

/// Raw regression variables and filtered drift along simulated paths.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub raw: Vec<f64>,
    pub fhat: Vec<f64>,
    pub raw_dim: usize,
    pub n: usize,
}

impl PathSample {
    pub fn raw_at(&self, i: usize) -> &[f64] {
        &self.raw[i * self.raw_dim..(i + 1) * self.raw_dim]
    }

    pub fn fhat_at(&self, i: usize) -> &[f64] {
        &self.fhat[i * self.n..(i + 1) * self.n]
    }
}

/// Forward `(yᴸ, π, f̂)` paths; path `p` uses streams keyed by `(seed, p)`.
pub fn sample_paths(spec: &ModelSpec, basis: &Basis, count: usize, seed: u64) -> Result<Vec<PathSample>> {
    let filter = WonhamFilter::new(spec)?;
    map_indexed(count, |p| -> Result<PathSample> {
        let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(seed, p, Stream::Chain));
        let latent = simulate_latent(spec, chain, &mut stream(seed, p, Stream::Latent));
        let fp = filter.run(&latent)?;
        let rd = basis.raw_dim();
        let mut raw = vec![0.0; spec.grid.len() * rd];
        for i in 0..spec.grid.len() {
            basis.raw_into(latent.yl_at(i), fp.pi_at(i), &mut raw[i * rd..(i + 1) * rd]);
        }
        Ok(PathSample { raw, fhat: fp.fhat, raw_dim: rd, n: spec.dims.n })
    })
    .into_iter()
    .collect()
}

/// A feature whose residual variance after projection on the features
/// already kept falls below this fraction of its variance is collinear.
const COLLINEAR_RTOL: f64 = 1e-9;

/// Least squares on standardized features; targets are row-major `paths × dim`.
/// Collinear features are dropped in basis order, or reported when `strict`.
fn fit_slice(
    step: usize,
    features: &[f64],
    nf: usize,
    targets: &[f64],
    dim: usize,
    strict: bool,
) -> Result<(SliceFit, Vec<f64>)> {
    let rows = targets.len() / dim;
    let mut varying = Vec::new();
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    for j in 0..nf {
        let col = (0..rows).map(|r| features[r * nf + j]);
        let mu = col.clone().sum::<f64>() / rows as f64;
        let var = col.map(|x| (x - mu) * (x - mu)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mu.abs()) {
            varying.push(j);
            mean.push(mu);
            scale.push(sd);
        }
    }
    let q = 1 + varying.len();
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DMatrix::<f64>::zeros(q, dim);
    let mut z = vec![0.0; q];
    z[0] = 1.0;
    for r in 0..rows {
        for (a, &j) in varying.iter().enumerate() {
            z[a + 1] = (features[r * nf + j] - mean[a]) / scale[a];
        }
        let t = &targets[r * dim..(r + 1) * dim];
        for x in 0..q {
            for y in x..q {
                gram[(x, y)] += z[x] * z[y];
            }
            for (d, &v) in t.iter().enumerate() {
                rhs[(x, d)] += z[x] * v;
            }
        }
    }
    for x in 0..q {
        for y in 0..x {
            gram[(x, y)] = gram[(y, x)];
        }
    }

    let mut keep = vec![0usize];
    for c in 1..q {
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| gram[(keep[a], keep[b])]);
        let g = DVector::from_fn(keep.len(), |a, _| gram[(keep[a], c)]);
        let explained = sub.cholesky().map_or(f64::INFINITY, |ch| g.dot(&ch.solve(&g)));
        if gram[(c, c)] - explained > COLLINEAR_RTOL * gram[(c, c)] {
            keep.push(c);
        }
    }
    if keep.len() < q {
        if strict {
            return Err(Error::RankDeficientRegression { step, rank: keep.len(), features: q });
        }
        log::debug!("offset regression step {step}: dropped {} collinear feature(s)", q - keep.len());
    }
    let kq = keep.len();
    let sub = DMatrix::from_fn(kq, kq, |a, b| gram[(keep[a], keep[b])]);
    let sub_rhs = DMatrix::from_fn(kq, dim, |a, d| rhs[(keep[a], d)]);
    let sol = sub
        .cholesky()
        .map(|ch| ch.solve(&sub_rhs))
        .ok_or(Error::RankDeficientRegression { step, rank: 0, features: q })?;

    let active: Vec<usize> = keep[1..].iter().map(|&c| varying[c - 1]).collect();
    let mean: Vec<f64> = keep[1..].iter().map(|&c| mean[c - 1]).collect();
    let scale: Vec<f64> = keep[1..].iter().map(|&c| scale[c - 1]).collect();
    let mut coeffs = vec![0.0; kq * dim];
    for x in 0..kq {
        for d in 0..dim {
            coeffs[x * dim + d] = sol[(x, d)];
        }
    }
    let mut fitted = vec![0.0; rows * dim];
    let mut z = vec![1.0; kq];
    for r in 0..rows {
        for (a, &j) in active.iter().enumerate() {
            z[a + 1] = (features[r * nf + j] - mean[a]) / scale[a];
        }
        let out = &mut fitted[r * dim..(r + 1) * dim];
        for x in 0..kq {
            for (o, &c) in out.iter_mut().zip(&coeffs[x * dim..(x + 1) * dim]) {
                *o += c * z[x];
            }
        }
    }
    Ok((SliceFit { active, mean, scale, coeffs }, fitted))
}

/// `Φᵢ(S + ½Δt gᵢ₊₁) + ½Δt gᵢ` for one path, written into `out`.
fn step_target(sys: &OffsetSystem, i: usize, s_next: &[f64], fhat_i: &[f64], fhat_next: &[f64], out: &mut [f64]) {
    let dim = sys.dim();
    let half = 0.5 * sys.dt;
    let mut carry = vec![0.0; dim];
    sys.forcing_into(i + 1, fhat_next, &mut carry);
    for (c, &s) in carry.iter_mut().zip(s_next) {
        *c = s + half * *c;
    }
    let mut g = vec![0.0; dim];
    sys.forcing_into(i, fhat_i, &mut g);
    for (o, &x) in out.iter_mut().zip(&g) {
        *o = half * x;
    }
    crate::linalg::gemv_acc(out, 1.0, &sys.propagators[i], &carry);
}

/// Backward regression over the grid.
pub fn solve_joint_offsets(spec: &ModelSpec, mf: &MeanFieldGains, opts: &OffsetOptions) -> Result<OffsetEstimator> {
    let basis = Basis::new(spec.dims.n, spec.chain.len(), opts.degree);
    let needed = 10 * (basis.len() + 1);
    if opts.paths < needed {
        return Err(Error::PathBudgetTooSmall { paths: opts.paths, features: basis.len() + 1 });
    }
    let sys = build_offset_system(spec, mf);
    let samples = sample_paths(spec, &basis, opts.paths, opts.seed)?;
    let est = regress(spec, &sys, &basis, &samples, opts)?;
    Ok(est)
}

fn regress(
    spec: &ModelSpec,
    sys: &OffsetSystem,
    basis: &Basis,
    samples: &[PathSample],
    opts: &OffsetOptions,
) -> Result<OffsetEstimator> {
    let dim = sys.dim();
    let rows = samples.len();
    let nf = basis.len();
    let steps = spec.grid.steps;
    let mut s_next = vec![0.0; rows * dim];
    // pathwise discounted forcing, whose mean is the step-0 estimate
    let mut realized = vec![0.0; rows * dim];
    let mut targets = vec![0.0; rows * dim];
    let mut carry = vec![0.0; dim];
    let mut features = vec![0.0; rows * nf];
    let mut slices = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        for (r, s) in samples.iter().enumerate() {
            let span = r * dim..(r + 1) * dim;
            step_target(sys, i, &s_next[span.clone()], s.fhat_at(i), s.fhat_at(i + 1), &mut targets[span.clone()]);
            step_target(sys, i, &realized[span.clone()], s.fhat_at(i), s.fhat_at(i + 1), &mut carry);
            realized[span].copy_from_slice(&carry);
            basis.features_into(s.raw_at(i), &mut features[r * nf..(r + 1) * nf]);
        }
        let (fit, fitted) = fit_slice(i, &features, nf, &targets, dim, opts.strict_rank)?;
        slices.push(fit);
        s_next = fitted;
    }
    let s0_stderr = (0..dim)
        .map(|d| {
            let col = (0..rows).map(|r| realized[r * dim + d]);
            let mu = col.clone().sum::<f64>() / rows as f64;
            let var = col.map(|x| (x - mu).powi(2)).sum::<f64>() / (rows.max(2) - 1) as f64;
            (var / rows as f64).sqrt()
        })
        .collect();
    slices.reverse();
    Ok(OffsetEstimator {
        version: ESTIMATOR_VERSION,
        grid: spec.grid,
        basis: basis.clone(),
        d0: sys.d0,
        dk: sys.dk,
        types: sys.types,
        paths: rows,
        seed: opts.seed,
        slices,
        s0_stderr,
    })
}

/// Out-of-sample check that one-step residuals have zero conditional mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub paths: usize,
    /// One flag per step `i = 0..steps−1`.
    pub slice_passed: Vec<bool>,
    /// Largest `|mean| / stderr` over bins and components, per step.
    pub worst_z: Vec<f64>,
}

impl MartingaleReport {
    pub fn pass_fraction(&self) -> f64 {
        self.slice_passed.iter().filter(|&&p| p).count() as f64 / self.slice_passed.len().max(1) as f64
    }
}

/// Residuals `Φᵢ(Ŝᵢ₊₁ + ½Δt gᵢ₊₁) + ½Δt gᵢ − Ŝᵢ` on fresh paths, binned by
/// terciles of the first raw variable that varies, each bin and component
/// tested against 3 standard errors.
pub fn martingale_diagnostic(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    est.check_compatible(spec)?;
    let sys = build_offset_system(spec, mf);
    let fresh = derive_seed(seed, 0x7E57);
    let samples = sample_paths(spec, &est.basis, paths, fresh)?;
    let dim = sys.dim();
    let nf = est.basis.len();
    let rd = est.basis.raw_dim();
    let mut scratch = vec![0.0; nf];
    let mut slice_passed = Vec::with_capacity(spec.grid.steps);
    let mut worst_z = Vec::with_capacity(spec.grid.steps);
    let mut resid = vec![0.0; paths * dim];
    let mut s_now = vec![0.0; dim];
    let mut s_next = vec![0.0; dim];
    let mut target = vec![0.0; dim];
    for i in 0..spec.grid.steps {
        for (r, s) in samples.iter().enumerate() {
            est.evaluate_raw(i, s.raw_at(i), &mut scratch, &mut s_now);
            est.evaluate_raw(i + 1, s.raw_at(i + 1), &mut scratch, &mut s_next);
            step_target(&sys, i, &s_next, s.fhat_at(i), s.fhat_at(i + 1), &mut target);
            for d in 0..dim {
                resid[r * dim + d] = target[d] - s_now[d];
            }
        }
        let key = (0..rd).find_map(|v| {
            let xs: Vec<f64> = samples.iter().map(|s| s.raw_at(i)[v]).collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo > 1e-12).then_some(xs)
        });
        let bins: Vec<usize> = match &key {
            None => vec![0; paths],
            Some(xs) => {
                let mut sorted = xs.clone();
                sorted.sort_by(f64::total_cmp);
                let q1 = sorted[paths / 3];
                let q2 = sorted[2 * paths / 3];
                xs.iter().map(|&x| if x < q1 { 0 } else if x < q2 { 1 } else { 2 }).collect()
            }
        };
        let mut ok = true;
        let mut worst: f64 = 0.0;
        for b in 0..3 {
            let members: Vec<usize> = (0..paths).filter(|&r| bins[r] == b).collect();
            if members.len() < 2 {
                continue;
            }
            let cnt = members.len() as f64;
            for d in 0..dim {
                let mean = members.iter().map(|&r| resid[r * dim + d]).sum::<f64>() / cnt;
                let var = members.iter().map(|&r| (resid[r * dim + d] - mean).powi(2)).sum::<f64>() / (cnt - 1.0);
                let se = (var / cnt).sqrt();
                let floor = 1e-9 * (1.0 + target_scale(&resid, dim, d));
                if mean.abs() <= floor {
                    continue;
                }
                let z = if se > 0.0 { mean.abs() / se } else { f64::INFINITY };
                worst = worst.max(z);
                if z > 3.0 {
                    ok = false;
                }
            }
        }
        slice_passed.push(ok);
        worst_z.push(worst);
    }
    Ok(MartingaleReport { paths, slice_passed, worst_z })
}

fn target_scale(resid: &[f64], dim: usize, d: usize) -> f64 {
    resid.iter().skip(d).step_by(dim).fold(0.0, |a, &x| a.max(x.abs()))
}
