//! Test-only oracles, written independently of the solver code paths.
#![allow(dead_code, clippy::type_complexity)]

use latent_mfg::meanfield::MeanFieldGains;
use latent_mfg::model::ModelSpec;
use nalgebra::{DMatrix, DVector};

/// Deterministic offsets `(s⁰, s̄¹..s̄ᴷ)` for a single-state chain, from the
/// per-agent equations
///
/// −ṡ⁰ = (𝔸₀ − 𝔹₀R₀⁻¹ℕ₀ᵀ − 𝔹₀R₀⁻¹𝔹₀ᵀΠ₀)ᵀ s⁰ + Π₀ 𝕄⁰,   𝕄⁰ = d⁰ + [f + F^π r̄; 0; B̄ r̄]
/// −ṡᵏ = (𝔸ₖ − 𝔹ₖRₖ⁻¹ℕₖᵀ − 𝔹ₖRₖ⁻¹𝔹ₖᵀΠₖ)ᵀ sᵏ + Πₖ [bₖ; 𝕄⁰ − 𝔹₀R₀⁻¹𝔹₀ᵀ s⁰]
///
/// with r̄ₖ = −Rₖ⁻¹Bₖᵀ sᵏ[0..n], integrated by RK4 on the model grid
/// (coefficients averaged at half steps).
pub fn deterministic_offsets(spec: &ModelSpec, mf: &MeanFieldGains) -> Vec<DVector<f64>> {
    let n = spec.dims.n;
    let m = spec.dims.m;
    let kk = spec.types();
    let d0 = spec.major_ext_dim();
    let dk = spec.minor_ext_dim();
    let grid = spec.grid;
    let f = spec.common.drift(&spec.chain, 0, &spec.common.y0, 0);

    let coeffs = |i: usize| {
        let pi0 = mf.pi0.values[i].clone();
        let pik: Vec<_> = (0..kk).map(|k| mf.pik[k].values[i].clone()).collect();
        let a0 = mf.major.closed_loop(i, &pi0);
        let ak: Vec<_> = (0..kk).map(|k| mf.minors[k].closed_loop(i, &pik[k])).collect();
        (pi0, pik, a0, ak, mf.major.deterministic_forcing(i).clone())
    };
    let avg = |i: usize| {
        let (p0a, pka, a0a, aka, da) = coeffs(i);
        let (p0b, pkb, a0b, akb, db) = coeffs(i + 1);
        (
            (p0a + p0b) * 0.5,
            pka.iter().zip(&pkb).map(|(x, y)| (x + y) * 0.5).collect::<Vec<_>>(),
            (a0a + a0b) * 0.5,
            aka.iter().zip(&akb).map(|(x, y)| (x + y) * 0.5).collect::<Vec<_>>(),
            (da + db) * 0.5,
        )
    };
    let gram0 = &mf.major.b * &mf.major.r_inv * mf.major.b.transpose();
    let rhs = |s: &DVector<f64>, c: &(DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>, Vec<DMatrix<f64>>, DVector<f64>)| {
        let (pi0, pik, a0, ak, d) = c;
        let s0 = s.rows(0, d0).into_owned();
        let mut rbar = DVector::zeros(m * kk);
        for k in 0..kk {
            let sk = s.rows(d0 + k * dk, n);
            let t = &spec.minors[k];
            let rk = -(t.cost.r.clone().try_inverse().unwrap()) * t.dynamics.b.transpose() * sk;
            rbar.rows_mut(k * m, m).copy_from(&rk);
        }
        let mut m0 = d.clone();
        let fpi = DMatrix::from_fn(n, m * kk, |r, c| spec.common.f[(r, c)] * spec.population.type_fractions[c / m]);
        m0.rows_mut(0, n).add_assign(&(&f + &fpi * &rbar));
        for k in 0..kk {
            let bk = &spec.minors[k].dynamics.b;
            let add = bk * rbar.rows(k * m, m);
            m0.rows_mut(2 * n + k * n, n).add_assign(&add);
        }
        let mut out = DVector::zeros(s.len());
        out.rows_mut(0, d0).copy_from(&(a0.transpose() * &s0 + pi0 * &m0));
        let lower = &m0 - &gram0 * &s0;
        for k in 0..kk {
            let sk = s.rows(d0 + k * dk, dk).into_owned();
            let mut mk = DVector::zeros(dk);
            mk.rows_mut(0, n).copy_from(spec.minors[k].dynamics.drift.at_step(0));
            mk.rows_mut(n, d0).copy_from(&lower);
            out.rows_mut(d0 + k * dk, dk).copy_from(&(ak[k].transpose() * sk + &pik[k] * mk));
        }
        out
    };
    let dim = d0 + kk * dk;
    let h = grid.dt();
    let mut out = vec![DVector::zeros(dim); grid.len()];
    let mut s = DVector::zeros(dim);
    for i in (0..grid.steps).rev() {
        let hi = coeffs(i + 1);
        let mid = avg(i);
        let lo = coeffs(i);
        let k1 = rhs(&s, &hi);
        let k2 = rhs(&(&s + &k1 * (0.5 * h)), &mid);
        let k3 = rhs(&(&s + &k2 * (0.5 * h)), &mid);
        let k4 = rhs(&(&s + &k3 * h), &lo);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out[i] = s.clone();
    }
    out
}

use std::ops::AddAssign;

/// Bootstrap particle filter for the chain given the latent increments.
///
/// Each step reweights particles by the Gaussian likelihood of `dyᴸ` under
/// their current state, resamples systematically, then lets every particle
/// jump with probability `1 − exp(−qⱼΔt)`. Returns the particle posterior on
/// every grid point, flattened with stride `M`.
pub fn particle_filter(spec: &ModelSpec, yl: &[f64], particles: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let n = spec.dims.n;
    let mm = spec.chain.len();
    let dt = spec.grid.dt();
    let steps = spec.grid.steps;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prec = (&spec.common.sigma * spec.common.sigma.transpose()).try_inverse().unwrap();
    let draw = |probs: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
        let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        probs.len() - 1
    };
    let mut state: Vec<usize> = (0..particles).map(|_| draw(spec.chain.initial.as_slice(), &mut rng)).collect();
    let posterior = |state: &[usize]| {
        let mut p = vec![0.0; mm];
        state.iter().for_each(|&j| p[j] += 1.0 / particles as f64);
        p
    };
    let mut out = posterior(&state);
    for i in 0..steps {
        let y = DVector::from_column_slice(&yl[i * n..(i + 1) * n]);
        let dy = DVector::from_column_slice(&yl[(i + 1) * n..(i + 2) * n]) - &y;
        let loglik: Vec<f64> = (0..mm)
            .map(|j| {
                let e = &dy - spec.common.drift(&spec.chain, i, &y, j) * dt;
                -0.5 * (e.transpose() * &prec * &e)[0] / dt
            })
            .collect();
        let top = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = state.iter().map(|&j| (loglik[j] - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let u0: f64 = rng.random::<f64>() / particles as f64;
        let mut resampled = Vec::with_capacity(particles);
        let mut acc = 0.0;
        let mut idx = 0;
        for p in 0..particles {
            let target = u0 + p as f64 / particles as f64;
            while acc + w[idx] / total < target && idx + 1 < particles {
                acc += w[idx] / total;
                idx += 1;
            }
            resampled.push(state[idx]);
        }
        state = resampled;
        for s in state.iter_mut() {
            let exit = spec.chain.exit_rate(*s);
            if exit > 0.0 && rng.random::<f64>() < 1.0 - (-exit * dt).exp() {
                let row: Vec<f64> = (0..mm).map(|j| if j == *s { 0.0 } else { spec.chain.rates[(*s, j)] }).collect();
                *s = draw(&row, &mut rng);
            }
        }
        out.extend(posterior(&state));
    }
    out
}

/// Two-state chain with `f = γ`, `γ = ∓1`, unit rates and unit noise.
pub fn two_state_filter_model(steps: usize) -> ModelSpec {
    let p = latent_mfg::model::ScalarParams {
        steps,
        chain_states: vec![-1.0, 1.0],
        rates: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        chain_initial: vec![0.5, 0.5],
        common_sigma: 1.0,
        ..Default::default()
    };
    p.build().unwrap()
}
