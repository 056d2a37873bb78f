//! Browser bindings for the scalar two-type reference model.
//!
//! Every entry point takes a JSON object of [`Knobs`] (missing keys keep the
//! reference values) and returns a JSON string for the page to plot.

use latent_mfg::latent::{simulate_chain, simulate_latent};
use latent_mfg::meanfield::{check_hurwitz, solve_consistency, ConsistencyOptions};
use latent_mfg::model::{validate, ModelSpec, ScalarParams};
use latent_mfg::offset::{solve_joint_offsets, OffsetOptions};
use latent_mfg::rng::{stream, Stream};
use latent_mfg::sim::{paired_cost_gap, simulate_finite, simulate_meanfield, SimOptions};
use latent_mfg::WonhamFilter;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// Control impact of type 0 on `y`.
    pub coupling: f64,
    /// Cross weight between own state and `y` in the type-0 cost.
    pub tracking: f64,
    /// Switching rate of the two-state chain (both directions).
    pub rate: f64,
    /// Chain drift values are `±gamma`.
    pub gamma: f64,
    pub sigma: f64,
    pub steps: usize,
    pub seed: u64,
    pub paths: usize,
}

impl Default for Knobs {
    fn default() -> Self {
        Self { coupling: 2.0, tracking: -0.8, rate: 1.0, gamma: 1.0, sigma: 0.5, steps: 100, seed: 1, paths: 200 }
    }
}

impl Knobs {
    fn spec(&self) -> Result<ModelSpec, String> {
        let mut p = ScalarParams::coupled_reference();
        p.f[0] = self.coupling;
        p.minors[0].q[0][1] = self.tracking;
        p.minors[0].q[1][0] = self.tracking;
        p.rates = vec![vec![0.0, self.rate], vec![self.rate, 0.0]];
        p.chain_states = vec![-self.gamma, self.gamma];
        p.common_sigma = self.sigma;
        p.steps = self.steps;
        let spec = p.build().map_err(|e| e.to_string())?;
        validate(&spec).map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

fn parse(knobs: &str) -> Result<Knobs, String> {
    if knobs.trim().is_empty() {
        return Ok(Knobs::default());
    }
    serde_json::from_str(knobs).map_err(|e| e.to_string())
}

fn reply<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Serialize)]
struct Equilibrium {
    iterations: usize,
    residual: f64,
    residual_history: Vec<f64>,
    max_real_eig: f64,
    t: Vec<f64>,
    /// `Π₀` on `(x⁰, x⁰)`.
    pi_major: Vec<f64>,
    /// `Πₖ` on `(xⁱ, xⁱ)`, one series per type.
    pi_minor: Vec<Vec<f64>>,
    /// Feedback of type-`k` mean-field control on its own class mean.
    cbar: Vec<Vec<f64>>,
}

fn equilibrium(k: &Knobs) -> Result<Equilibrium, String> {
    let spec = k.spec()?;
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).map_err(|e| e.to_string())?;
    let types = spec.types();
    Ok(Equilibrium {
        iterations: mf.iterations,
        residual: mf.residual,
        residual_history: mf.residual_history.clone(),
        max_real_eig: check_hurwitz(&mf, &spec).max_real_eig,
        t: spec.grid.times().collect(),
        pi_major: mf.pi0.values.iter().map(|p| p[(1, 1)]).collect(),
        pi_minor: (0..types).map(|j| mf.pik[j].values.iter().map(|p| p[(0, 0)]).collect()).collect(),
        cbar: (0..types).map(|j| mf.gains.cbar.iter().map(|c| c[(j, j)]).collect()).collect(),
    })
}

/// Consistency fixed point: residual history and Riccati trajectories.
#[wasm_bindgen]
pub fn solve_equilibrium(knobs: &str) -> Result<String, JsError> {
    reply(parse(knobs).and_then(|k| equilibrium(&k)))
}

#[derive(Serialize)]
struct Filtered {
    t: Vec<f64>,
    chain: Vec<f64>,
    posterior: Vec<f64>,
    yl: Vec<f64>,
}

fn filtered(k: &Knobs) -> Result<Filtered, String> {
    let spec = k.spec()?;
    let filter = WonhamFilter::new(&spec).map_err(|e| e.to_string())?;
    let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(k.seed, 0, Stream::Chain));
    let latent = simulate_latent(&spec, chain, &mut stream(k.seed, 0, Stream::Latent));
    let path = filter.run(&latent).map_err(|e| e.to_string())?;
    Ok(Filtered {
        t: spec.grid.times().collect(),
        chain: latent.chain.iter().map(|&j| spec.chain.states[j][0]).collect(),
        posterior: (0..spec.grid.len()).map(|i| path.pi_at(i)[1]).collect(),
        yl: latent.yl.clone(),
    })
}

/// One latent path with the filter's posterior probability of the high state.
#[wasm_bindgen]
pub fn filter_path(knobs: &str) -> Result<String, JsError> {
    reply(parse(knobs).and_then(|k| filtered(&k)))
}

#[derive(Serialize)]
struct Convergence {
    population: Vec<usize>,
    /// Row labels of `diff` and `stderr`.
    classes: Vec<String>,
    diff: Vec<Vec<f64>>,
    stderr: Vec<Vec<f64>>,
    meanfield: Vec<f64>,
}

fn convergence(k: &Knobs) -> Result<Convergence, String> {
    let spec = k.spec()?;
    let err = |e: latent_mfg::Error| e.to_string();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).map_err(err)?;
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 1000, degree: 2, seed: k.seed, ..Default::default() })
        .map_err(err)?;
    let opts = SimOptions { paths: k.paths, seed: k.seed, ..Default::default() };
    let inf = simulate_meanfield(&spec, &mf, &est, &opts).map_err(err)?.report;
    let population = spec.population.n_schedule.clone();
    let classes: Vec<Option<usize>> = std::iter::once(None).chain((0..spec.types()).map(Some)).collect();
    let mut diff = vec![Vec::new(); classes.len()];
    let mut stderr = vec![Vec::new(); classes.len()];
    for &n in &population {
        let rep = simulate_finite(&spec, &mf, &est, n, &opts).map_err(err)?.report;
        for (c, class) in classes.iter().enumerate() {
            let g = paired_cost_gap(&rep, &inf, *class);
            diff[c].push(g.diff.abs());
            stderr[c].push(g.stderr);
        }
    }
    let mut meanfield = vec![inf.major.mean];
    meanfield.extend(inf.minor_by_type.iter().map(|s| s.mean));
    Ok(Convergence {
        population,
        classes: classes.iter().map(|c| c.map_or("major".into(), |k| format!("minor{k}"))).collect(),
        diff,
        stderr,
        meanfield,
    })
}

/// Paired finite-population cost gaps over the reference schedule.
#[wasm_bindgen]
pub fn cost_convergence(knobs: &str) -> Result<String, JsError> {
    reply(parse(knobs).and_then(|k| convergence(&k)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_the_reference_model() {
        assert_eq!(Knobs::default().spec().unwrap(), ScalarParams::coupled_reference().build().unwrap());
    }

    #[test]
    fn entry_points_produce_plottable_series() {
        let k = Knobs { paths: 20, ..Default::default() };
        let e = equilibrium(&k).unwrap();
        assert!(e.residual < 1e-8 && e.max_real_eig < 0.0);
        assert_eq!(e.t.len(), 101);
        let f = filtered(&k).unwrap();
        assert!(f.posterior.iter().all(|p| (0.0..=1.0).contains(p)));
        let c = convergence(&k).unwrap();
        assert_eq!(c.diff.len(), 3);
        assert_eq!(c.diff[0].len(), c.population.len());
        assert!(parse(r#"{"coupling": 1.0, "bogus": 2}"#).is_err());
        assert!(Knobs { rate: -1.0, ..Default::default() }.spec().is_err());
    }
}
