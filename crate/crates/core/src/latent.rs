//! Latent drivers of the common process: the Markov chain `Γ` and the
//! unimpacted process `dyᴸ = f(t, yᴸ, Γ) dt + σ dw`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::grid::TimeGrid;
use crate::model::{LatentChainSpec, ModelSpec};

/// Draw an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Chain state at every grid point. The continuous-time path is simulated
/// exactly with exponential holding times and read off at the grid points.
pub fn simulate_chain<R: Rng + ?Sized>(chain: &LatentChainSpec, grid: &TimeGrid, rng: &mut R) -> Vec<usize> {
    let mut state = sample_categorical(chain.initial.as_slice(), rng);
    let mut out = Vec::with_capacity(grid.len());
    let mut clock = 0.0;
    let mut next_jump = holding_time(chain, state, rng);
    for i in 0..grid.len() {
        let t = grid.time(i);
        while clock + next_jump <= t {
            clock += next_jump;
            state = jump_target(chain, state, rng);
            next_jump = holding_time(chain, state, rng);
        }
        out.push(state);
    }
    out
}

fn holding_time<R: Rng + ?Sized>(chain: &LatentChainSpec, state: usize, rng: &mut R) -> f64 {
    let rate = chain.exit_rate(state);
    if rate > 0.0 {
        Exp::new(rate).map(|e| e.sample(rng)).unwrap_or(f64::INFINITY)
    } else {
        f64::INFINITY
    }
}

fn jump_target<R: Rng + ?Sized>(chain: &LatentChainSpec, state: usize, rng: &mut R) -> usize {
    let rate = chain.exit_rate(state);
    let probs: Vec<f64> = (0..chain.len())
        .map(|j| if j == state { 0.0 } else { chain.rates[(state, j)] / rate })
        .collect();
    sample_categorical(&probs, rng)
}

/// One realization of `(Γ, yᴸ)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub chain: Vec<usize>,
    /// `yᴸ(tᵢ)`, flattened with stride `n`.
    pub yl: Vec<f64>,
    /// Latent Wiener increments, stride `r`, one per step.
    pub dw: Vec<f64>,
    pub n: usize,
    pub r: usize,
}

impl LatentPath {
    pub fn yl_at(&self, i: usize) -> &[f64] {
        &self.yl[i * self.n..(i + 1) * self.n]
    }

    pub fn dyl(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|c| self.yl[(i + 1) * self.n + c] - self.yl[i * self.n + c]).collect()
    }

    pub fn dw_at(&self, i: usize) -> &[f64] {
        &self.dw[i * self.r..(i + 1) * self.r]
    }
}

/// Euler–Maruyama for `yᴸ` given a chain path.
pub fn simulate_latent<R: Rng + ?Sized>(spec: &ModelSpec, chain: Vec<usize>, rng: &mut R) -> LatentPath {
    let grid = &spec.grid;
    let (n, r) = (spec.dims.n, spec.dims.r);
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut yl = vec![0.0; grid.len() * n];
    yl[..n].copy_from_slice(spec.common.y0.as_slice());
    let mut dw = vec![0.0; grid.steps * r];
    let mut f = vec![0.0; n];
    for i in 0..grid.steps {
        for w in &mut dw[i * r..(i + 1) * r] {
            let z: f64 = StandardNormal.sample(rng);
            *w = sq * z;
        }
        let (head, tail) = yl.split_at_mut((i + 1) * n);
        let cur = &head[i * n..];
        spec.common.drift_into(&spec.chain, i, cur, chain[i], &mut f);
        let next = &mut tail[..n];
        for c in 0..n {
            next[c] = cur[c] + f[c] * dt;
        }
        crate::linalg::gemv_acc(next, 1.0, &spec.common.sigma, &dw[i * r..(i + 1) * r]);
    }
    LatentPath { chain, yl, dw, n, r }
}

/// Stationary law of a generator, by solving `πᵀQ = 0`, `Σπ = 1`.
pub fn stationary_distribution(chain: &LatentChainSpec) -> Option<DVector<f64>> {
    let mm = chain.len();
    let q = chain.generator();
    let mut a = q.transpose();
    for j in 0..mm {
        a[(mm - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(mm);
    rhs[mm - 1] = 1.0;
    a.lu().solve(&rhs)
}
