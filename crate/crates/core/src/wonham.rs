//! Wonham filter for the latent chain observed through `yᴸ`.
//!
//! With `fⱼ = f(t, yᴸ, γⱼ)`, `f̂ = Σⱼ πʲ fⱼ` and `S = σσᵀ`,
//!
//! ```text
//! dπʲ = (Qᵀπ)ⱼ dt + πʲ (fⱼ − f̂)ᵀ S⁻¹ (dyᴸ − f̂ dt)
//! dŵ  = σ⁺ (dyᴸ − f̂ dt)
//! ```
//!
//! discretized by Euler–Maruyama and projected back onto the simplex.

use nalgebra::{DMatrix, DVector};
use crate::error::{Error, Result};
use crate::latent::LatentPath;
use crate::linalg::{right_pseudo_inverse, spd_inverse};
use crate::model::{CommonProcessSpec, LatentChainSpec, ModelSpec};

/// Pre-projection components below this are reported.
const NEGATIVE_WARN: f64 = -0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub pi: DVector<f64>,
    pub step: usize,
    pub t: f64,
    pub fhat: DVector<f64>,
    pub innovation_accum: DVector<f64>,
    /// Number of steps where some component went below −0.01 before projection.
    pub negative_excursions: usize,
}

#[derive(Debug, Clone)]
pub struct WonhamFilter {
    chain: LatentChainSpec,
    common: CommonProcessSpec,
    generator_t: DMatrix<f64>,
    /// `(σσᵀ)⁻¹`.
    precision: DMatrix<f64>,
    /// `σ⁺`, a right inverse of `σ`.
    sigma_pinv: DMatrix<f64>,
    dt: f64,
    horizon_steps: usize,
    n: usize,
}

impl WonhamFilter {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let sigma = &spec.common.sigma;
        let (n, r) = (spec.dims.n, spec.dims.r);
        let inverses = right_pseudo_inverse(sigma).zip(spd_inverse(&(sigma * sigma.transpose())));
        // M = 1 tolerates a degenerate σ
        let (sigma_pinv, precision) = match inverses {
            Some(pair) => pair,
            None if spec.chain.len() == 1 => (DMatrix::zeros(r, n), DMatrix::zeros(n, n)),
            None => return Err(Error::SingularSigma),
        };
        Ok(Self {
            chain: spec.chain.clone(),
            common: spec.common.clone(),
            generator_t: spec.chain.generator().transpose(),
            precision,
            sigma_pinv,
            dt: spec.grid.dt(),
            horizon_steps: spec.grid.steps,
            n: spec.dims.n,
        })
    }

    pub fn states(&self) -> usize {
        self.chain.len()
    }

    /// Columns `f(tᵢ, yᴸ, γⱼ)`.
    pub fn drifts(&self, step: usize, yl: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.states());
        for j in 0..self.states() {
            self.common.drift_into(&self.chain, step, yl, j, out.column_mut(j).as_mut_slice());
        }
        out
    }

    pub fn initial_state(&self, yl0: &[f64]) -> FilterState {
        let pi = self.chain.initial.clone();
        let fhat = self.drifts(0, yl0) * &pi;
        FilterState {
            pi,
            step: 0,
            t: 0.0,
            fhat,
            innovation_accum: DVector::zeros(self.sigma_pinv.nrows()),
            negative_excursions: 0,
        }
    }

    /// `dŵ = σ⁺(dyᴸ − f̂ dt)` using the filter's current `f̂`.
    pub fn innovation_increment(&self, state: &FilterState, dyl: &[f64]) -> DVector<f64> {
        let e = DVector::from_column_slice(dyl) - &state.fhat * self.dt;
        &self.sigma_pinv * e
    }

    /// Advances one grid step. `yl` is `yᴸ` at the current step and `dyl` the
    /// observed increment over it. Returns the innovation increment.
    pub fn step(&self, state: &mut FilterState, yl: &[f64], dyl: &[f64]) -> Result<DVector<f64>> {
        let dt = self.dt;
        let i = state.step;
        let f = self.drifts(i, yl);
        let fhat = &f * &state.pi;
        let e = DVector::from_column_slice(dyl) - &fhat * dt;
        let innovation = &self.sigma_pinv * &e;
        let weighted = &self.precision * &e;
        let mut next = &state.pi + &self.generator_t * &state.pi * dt;
        for j in 0..self.states() {
            let gain = (f.column(j) - &fhat).dot(&weighted);
            next[j] += state.pi[j] * gain;
        }
        if next.iter().any(|&p| p < NEGATIVE_WARN) {
            if state.negative_excursions == 0 {
                log::debug!("filter posterior went negative ({:.3e}) at step {i}; projecting", next.min());
            }
            state.negative_excursions += 1;
        }
        next.iter_mut().for_each(|p| *p = p.max(0.0));
        let total = next.sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::DegenerateFilter { t: (i + 1) as f64 * dt });
        }
        next /= total;

        let yl_next: Vec<f64> = yl.iter().zip(dyl).map(|(a, b)| a + b).collect();
        let step = (i + 1).min(self.horizon_steps);
        state.fhat = self.drifts(step, &yl_next) * &next;
        state.pi = next;
        state.step = i + 1;
        state.t = state.step as f64 * dt;
        state.innovation_accum += &innovation;
        Ok(innovation)
    }

    /// Runs the filter along a latent path.
    pub fn run(&self, path: &LatentPath) -> Result<FilterPath> {
        let steps = path.chain.len() - 1;
        let mm = self.states();
        let mut state = self.initial_state(path.yl_at(0));
        let mut pi = Vec::with_capacity((steps + 1) * mm);
        let mut fhat = Vec::with_capacity((steps + 1) * self.n);
        let mut innovation = Vec::with_capacity(steps * self.sigma_pinv.nrows());
        pi.extend_from_slice(state.pi.as_slice());
        fhat.extend_from_slice(state.fhat.as_slice());
        for i in 0..steps {
            let dw = self.step(&mut state, path.yl_at(i), &path.dyl(i))?;
            innovation.extend_from_slice(dw.as_slice());
            pi.extend_from_slice(state.pi.as_slice());
            fhat.extend_from_slice(state.fhat.as_slice());
        }
        Ok(FilterPath { pi, fhat, innovation, states: mm, n: self.n, r: self.sigma_pinv.nrows() })
    }
}

/// Filter output along a path, flattened per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    pub pi: Vec<f64>,
    pub fhat: Vec<f64>,
    pub innovation: Vec<f64>,
    pub states: usize,
    pub n: usize,
    pub r: usize,
}

impl FilterPath {
    pub fn pi_at(&self, i: usize) -> &[f64] {
        &self.pi[i * self.states..(i + 1) * self.states]
    }

    pub fn fhat_at(&self, i: usize) -> &[f64] {
        &self.fhat[i * self.n..(i + 1) * self.n]
    }

    pub fn innovation_at(&self, i: usize) -> &[f64] {
        &self.innovation[i * self.r..(i + 1) * self.r]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{simulate_chain, simulate_latent};
    use crate::model::ScalarParams;
    use crate::rng::{stream, Stream};

    fn two_state(rates: f64, gammas: [f64; 2]) -> ModelSpec {
        let mut p = ScalarParams::coupled_reference();
        p.chain_states = gammas.to_vec();
        p.rates = vec![vec![0.0, rates], vec![rates, 0.0]];
        p.common_sigma = 1.0;
        p.build().unwrap()
    }

    fn filtered(spec: &ModelSpec, seed: u64) -> FilterPath {
        let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(seed, 0, Stream::Chain));
        let path = simulate_latent(spec, chain, &mut stream(seed, 0, Stream::Latent));
        WonhamFilter::new(spec).unwrap().run(&path).unwrap()
    }

    #[test]
    fn single_state_chain_is_certain() {
        let spec = ScalarParams::decoupled().build().unwrap();
        let out = filtered(&spec, 3);
        assert!(out.pi.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn uninformative_drift_keeps_prior() {
        let spec = two_state(0.0, [0.7, 0.7]);
        let out = filtered(&spec, 5);
        assert!(out.pi.chunks(2).all(|p| p == [0.5, 0.5]));
    }

    #[test]
    fn posterior_stays_on_simplex() {
        let spec = two_state(1.0, [-3.0, 3.0]);
        let out = filtered(&spec, 9);
        for p in out.pi.chunks(2) {
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((p[0] + p[1] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_drift_recovers_latent_increment() {
        let spec = ScalarParams::decoupled().build().unwrap();
        let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(2, 0, Stream::Chain));
        let path = simulate_latent(&spec, chain, &mut stream(2, 0, Stream::Latent));
        let out = WonhamFilter::new(&spec).unwrap().run(&path).unwrap();
        for i in 0..spec.grid.steps {
            assert!((out.innovation_at(i)[0] - path.dw_at(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let mut p = ScalarParams::coupled_reference();
        p.common_sigma = 0.0;
        assert!(matches!(WonhamFilter::new(&p.build().unwrap()), Err(Error::SingularSigma)));
    }
}
