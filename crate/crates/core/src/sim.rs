//! Finite-population and mean-field simulation under the equilibrium laws.
//!
//! Every agent plays
//!
//! ```text
//! u⁰ = −R₀⁻¹[ℕ₀ᵀX⁰ + 𝔹₀ᵀ(Π₀X⁰ + s⁰)],   X⁰ = [y; x⁰; x̄]
//! uⁱ = −Rₖ⁻¹[ℕₖᵀXⁱ + 𝔹ₖᵀ(ΠₖXⁱ + s̄ᵏ)],   Xⁱ = [xⁱ; y; x⁰; x̄]
//! ```
//!
//! where `x̄` is the mean-field state each agent propagates from what it
//! observes, `dx̄ = (Āx̄ + Ḡx⁰ + L̄y + m̄) dt`. In the finite system `y` is driven
//! by the empirical averages; in the mean-field system by `x̄` and `ū`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{sample_categorical, simulate_chain, simulate_latent};
use crate::linalg::{bilinear, gemv_acc};
use crate::meanfield::MeanFieldGains;
use crate::model::ModelSpec;
use crate::nash::{AgentRole, DeviationPolicy};
use crate::offset::OffsetEstimator;
use crate::parallel::map_indexed;
use crate::rng::{stream, Stream};
use crate::wonham::WonhamFilter;

const UNSTABLE_NORM: f64 = 1e9;

/// `u⁰ = −R₀⁻¹[ℕ₀ᵀX⁰ + 𝔹₀ᵀ(Π₀X⁰ + s⁰)]`.
pub fn control_major(x0_ext: &DVector<f64>, pi0: &DMatrix<f64>, s0: &DVector<f64>, mf: &MeanFieldGains) -> DVector<f64> {
    let sys = &mf.major;
    -(&sys.r_inv * (sys.cross.transpose() * x0_ext + sys.b.transpose() * (pi0 * x0_ext + s0)))
}

/// `uⁱ = −Rₖ⁻¹[ℕₖᵀXⁱ + 𝔹ₖᵀ(ΠₖXⁱ + sⁱ)]`.
pub fn control_minor(
    k: usize,
    xi_ext: &DVector<f64>,
    pik: &DMatrix<f64>,
    sik: &DVector<f64>,
    mf: &MeanFieldGains,
) -> DVector<f64> {
    let sys = &mf.minors[k];
    -(&sys.r_inv * (sys.cross.transpose() * xi_ext + sys.b.transpose() * (pik * xi_ext + sik)))
}

/// Running and terminal cost pieces, each carrying the factor ½.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostParts {
    pub terminal: f64,
    pub state: f64,
    pub cross: f64,
    pub control: f64,
}

impl CostParts {
    pub fn total(&self) -> f64 {
        self.terminal + self.state + self.cross + self.control
    }

    fn add_scaled(&mut self, other: &CostParts, w: f64) {
        self.terminal += w * other.terminal;
        self.state += w * other.state;
        self.cross += w * other.cross;
        self.control += w * other.control;
    }
}

/// Trapezoid-rule accumulation of `½∫(zᵀQz + 2zᵀNu + uᵀRu)` plus `½z_Tᵀ G z_T`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostAccumulator {
    pub parts: CostParts,
}

impl CostAccumulator {
    pub fn running(&mut self, weight: f64, z: &[f64], u: &[f64], q: &DMatrix<f64>, n: &DMatrix<f64>, r: &DMatrix<f64>) {
        let h = 0.5 * weight;
        self.parts.state += h * bilinear(z, q, z);
        self.parts.cross += h * 2.0 * bilinear(z, n, u);
        self.parts.control += h * bilinear(u, r, u);
    }

    pub fn terminal(&mut self, z: &[f64], g: &DMatrix<f64>) {
        self.parts.terminal += 0.5 * bilinear(z, g, z);
    }
}

/// Trapezoid weight of grid point `i`.
pub fn trapezoid_weight(i: usize, steps: usize, dt: f64) -> f64 {
    if i == 0 || i == steps {
        0.5 * dt
    } else {
        dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub paths: usize,
    pub seed: u64,
    /// Keep full trajectories.
    pub record: bool,
    /// Force minor agent 0 to this type (its type draw is still consumed).
    pub tagged_type: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { paths: 1000, seed: 0, record: false, tagged_type: None }
    }
}

/// One agent's realized cost on one path. Agent `0` is the major agent,
/// agent `i ≥ 1` is minor agent `i − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentCost {
    pub path: usize,
    pub agent: usize,
    pub ty: Option<usize>,
    pub total: f64,
    pub parts: CostParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub label: String,
    /// Paths contributing.
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
    pub parts: CostParts,
}

/// Realized costs with Monte Carlo summaries. For minor classes, each path
/// contributes the average over its agents of that class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `None` for the mean-field system.
    pub population: Option<usize>,
    pub paths: usize,
    pub major: CostSummary,
    pub minor_by_type: Vec<CostSummary>,
    pub minor_all: CostSummary,
    pub records: Vec<AgentCost>,
}

/// `sup_t` of path-averaged second moments, with the standard error at the maximizing time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub sup: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub population: Option<usize>,
    /// `E‖xⁱ‖²`, averaged over minor agents.
    pub minor_state: MomentBound,
    /// `E‖x⁽ᴺ⁾‖²` (in the mean-field system, `E‖x̄‖²` weighted by type fractions).
    pub empirical_mean: MomentBound,
    pub mean_field: MomentBound,
    pub common: MomentBound,
    pub major_state: MomentBound,
}

/// Full trajectory of one path, flattened per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub path: usize,
    pub agents: usize,
    pub types: Vec<usize>,
    pub chain: Vec<usize>,
    pub yl: Vec<f64>,
    pub y: Vec<f64>,
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
    /// Stride `agents·n`.
    pub x: Vec<f64>,
    /// Stride `agents·m`.
    pub u: Vec<f64>,
    pub xbar: Vec<f64>,
    pub pi: Vec<f64>,
    /// `x⁽ᴺ⁾`, stride `n`.
    pub x_avg: Vec<f64>,
    /// `u⁽ᴺ⁾`, stride `m`.
    pub u_avg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: CostReport,
    pub moments: MomentReport,
    pub paths: Vec<SimPath>,
}

/// Unilateral deviation of one agent.
#[derive(Debug, Clone, Copy)]
pub struct Deviation<'a> {
    pub role: AgentRole,
    pub policy: &'a DeviationPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Population {
    Finite(usize),
    MeanField,
}

/// Gains split for fast per-agent evaluation.
struct Plan<'a> {
    spec: &'a ModelSpec,
    mf: &'a MeanFieldGains,
    est: &'a OffsetEstimator,
    filter: WonhamFilter,
    /// `K₀ = R₀⁻¹(ℕ₀ᵀ + 𝔹₀ᵀΠ₀)`, per step.
    k0: Vec<DMatrix<f64>>,
    /// `R₀⁻¹𝔹₀ᵀ`.
    j0: DMatrix<f64>,
    /// Per type and step: `Kₖ` columns acting on `xⁱ`.
    k_own: Vec<Vec<DMatrix<f64>>>,
    /// Per type and step: `Kₖ` columns acting on `[y; x⁰; x̄]`.
    k_common: Vec<Vec<DMatrix<f64>>>,
    /// `Rₖ⁻¹𝔹ₖᵀ`.
    jk: Vec<DMatrix<f64>>,
    sig0: DMatrix<f64>,
    sigk: Vec<DMatrix<f64>>,
    /// Column blocks `Fᵏ` and `Hᵏ`.
    fk: Vec<DMatrix<f64>>,
    hk: Vec<DMatrix<f64>>,
    f_pi: DMatrix<f64>,
    h_pi: DMatrix<f64>,
    bbar: DMatrix<f64>,
}

impl<'a> Plan<'a> {
    fn new(spec: &'a ModelSpec, mf: &'a MeanFieldGains, est: &'a OffsetEstimator) -> Result<Self> {
        est.check_compatible(spec)?;
        if mf.gains.len() != spec.grid.len() {
            return Err(Error::GridMismatch("mean-field gains are not on the model grid".into()));
        }
        let n = spec.dims.n;
        let m = spec.dims.m;
        let kk = spec.types();
        let len = spec.grid.len();
        let k0 = (0..len).map(|i| mf.major_feedback(i)).collect();
        let j0 = &mf.major.r_inv * mf.major.b.transpose();
        let mut k_own = Vec::with_capacity(kk);
        let mut k_common = Vec::with_capacity(kk);
        for k in 0..kk {
            let full: Vec<_> = (0..len).map(|i| mf.minor_feedback(k, i)).collect();
            let d = full[0].ncols();
            k_own.push(full.iter().map(|f| f.columns(0, n).into_owned()).collect());
            k_common.push(full.iter().map(|f| f.columns(n, d - n).into_owned()).collect());
        }
        let jk = mf.minors.iter().map(|s| &s.r_inv * s.b.transpose()).collect();
        let fk = (0..kk).map(|k| spec.common.f.columns(k * m, m).into_owned()).collect();
        let hk = (0..kk).map(|k| spec.common.h.columns(k * n, n).into_owned()).collect();
        Ok(Self {
            spec,
            mf,
            est,
            filter: WonhamFilter::new(spec)?,
            k0,
            j0,
            k_own,
            k_common,
            jk,
            sig0: spec.effective_sigma(&spec.major.dynamics.sigma),
            sigk: spec.minors.iter().map(|t| spec.effective_sigma(&t.dynamics.sigma)).collect(),
            fk,
            hk,
            f_pi: mf.major.f_pi.clone(),
            h_pi: mf.major.h_pi.clone(),
            bbar: crate::linalg::block_diag(&spec.minors.iter().map(|t| &t.dynamics.b).collect::<Vec<_>>()),
        })
    }
}

struct PathResult {
    costs: Vec<(Option<usize>, CostParts)>,
    /// Per grid point: minor ‖x‖² averaged over agents, ‖x⁽ᴺ⁾‖², ‖x̄‖², ‖y‖², ‖x⁰‖².
    moments: Vec<[f64; 5]>,
    record: Option<SimPath>,
}

fn gaussian_into<R: Rng + ?Sized>(rng: &mut R, scale: f64, out: &mut [f64]) {
    for o in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *o = scale * z;
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[allow(clippy::too_many_lines)]
fn simulate_path(
    plan: &Plan<'_>,
    pop: Population,
    path: usize,
    opts: &SimOptions,
    deviation: Option<Deviation<'_>>,
) -> Result<PathResult> {
    let spec = plan.spec;
    let grid = &spec.grid;
    let (n, m, r) = (spec.dims.n, spec.dims.m, spec.dims.r);
    let kk = spec.types();
    let d0 = spec.major_ext_dim();
    let steps = grid.steps;
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let seed = opts.seed;

    let chain = simulate_chain(&spec.chain, grid, &mut stream(seed, path, Stream::Chain));
    let latent = simulate_latent(spec, chain, &mut stream(seed, path, Stream::Latent));
    let filtered = plan.filter.run(&latent)?;

    let agents = match pop {
        Population::Finite(count) => count,
        Population::MeanField => kk,
    };
    let types: Vec<usize> = match pop {
        Population::Finite(count) => {
            let mut rng = stream(seed, path, Stream::Types);
            (0..count)
                .map(|i| {
                    let t = sample_categorical(spec.population.type_fractions.as_slice(), &mut rng);
                    match (i, opts.tagged_type) {
                        (0, Some(k)) => k,
                        _ => t,
                    }
                })
                .collect()
        }
        Population::MeanField => (0..kk).collect(),
    };
    let mut class_size = vec![0usize; kk];
    for &t in &types {
        class_size[t] += 1;
    }

    let mut major_rng = stream(seed, path, Stream::Major);
    let mut minor_rng: Vec<_> = (0..agents).map(|i| stream(seed, path, Stream::Minor(i))).collect();

    let init0 = &spec.major.initial;
    let mut x0: Vec<f64> = (0..n)
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut major_rng);
            init0.mean[c] + init0.std[c] * z
        })
        .collect();
    let mut x = vec![0.0; agents * n];
    for (i, rng) in minor_rng.iter_mut().enumerate() {
        let init = &spec.minors[types[i]].initial;
        for c in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            x[i * n + c] = init.mean[c] + init.std[c] * z;
        }
    }
    let mut xbar = vec![0.0; n * kk];
    for (k, t) in spec.minors.iter().enumerate() {
        xbar[k * n..(k + 1) * n].copy_from_slice(t.initial.mean.as_slice());
    }
    let mut y: Vec<f64> = spec.common.y0.as_slice().to_vec();

    let dim = plan.est.dim();
    let mut s = vec![0.0; dim];
    let mut raw = vec![0.0; plan.est.basis.raw_dim()];
    let mut scratch = vec![0.0; plan.est.basis.len()];
    let mut ext0 = vec![0.0; d0];
    let mut u0 = vec![0.0; m];
    let mut u = vec![0.0; agents * m];
    let mut common = vec![0.0; kk * m];
    let mut rbar = vec![0.0; kk * m];
    let mut x_avg = vec![0.0; n];
    let mut u_avg = vec![0.0; m];
    let mut dev_feat = Vec::new();
    let mut dev_u = vec![0.0; m];

    let mut cost0 = CostAccumulator::default();
    let mut costs = vec![CostAccumulator::default(); agents];
    let mut moments = Vec::with_capacity(grid.len());
    let mut z = vec![0.0; 2 * n];
    let mut noise = vec![0.0; r];

    let mut rec = opts.record.then(|| SimPath {
        path,
        agents,
        types: types.clone(),
        chain: latent.chain.clone(),
        yl: latent.yl.clone(),
        y: Vec::with_capacity(grid.len() * n),
        x0: Vec::with_capacity(grid.len() * n),
        u0: Vec::with_capacity(grid.len() * m),
        x: Vec::with_capacity(grid.len() * agents * n),
        u: Vec::with_capacity(grid.len() * agents * m),
        xbar: Vec::with_capacity(grid.len() * n * kk),
        pi: filtered.pi.clone(),
        x_avg: Vec::with_capacity(grid.len() * n),
        u_avg: Vec::with_capacity(grid.len() * m),
    });

    let major = &spec.major;
    for i in 0..=steps {
        plan.est.basis.raw_into(latent.yl_at(i), filtered.pi_at(i), &mut raw);
        plan.est.evaluate_raw(i, &raw, &mut scratch, &mut s);
        let (s0, sbar) = s.split_at(plan.est.d0);

        ext0[..n].copy_from_slice(&y);
        ext0[n..2 * n].copy_from_slice(&x0);
        ext0[2 * n..].copy_from_slice(&xbar);

        x_avg.iter_mut().for_each(|v| *v = 0.0);
        if agents > 0 {
            for a in 0..agents {
                for c in 0..n {
                    x_avg[c] += x[a * n + c];
                }
            }
            x_avg.iter_mut().for_each(|v| *v /= agents as f64);
        }

        u0.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(&mut u0, -1.0, &plan.k0[i], &ext0);
        gemv_acc(&mut u0, -1.0, &plan.j0, s0);

        for k in 0..kk {
            let sk = &sbar[k * plan.est.dk..(k + 1) * plan.est.dk];
            let ck = &mut common[k * m..(k + 1) * m];
            ck.iter_mut().for_each(|v| *v = 0.0);
            gemv_acc(ck, -1.0, &plan.k_common[k][i], &ext0);
            gemv_acc(ck, -1.0, &plan.jk[k], sk);
            let rk = &mut rbar[k * m..(k + 1) * m];
            rk.iter_mut().for_each(|v| *v = 0.0);
            gemv_acc(rk, -1.0, &plan.jk[k], sk);
        }
        for a in 0..agents {
            let k = types[a];
            let ua = &mut u[a * m..(a + 1) * m];
            ua.copy_from_slice(&common[k * m..(k + 1) * m]);
            gemv_acc(ua, -1.0, &plan.k_own[k][i], &x[a * n..(a + 1) * n]);
        }

        if let Some(dev) = deviation {
            if !dev.policy.is_zero() {
                dev_feat.clear();
                match dev.role {
                    AgentRole::Major => {
                        dev_feat.extend_from_slice(&x0);
                        dev_feat.extend_from_slice(&y);
                        dev_feat.extend_from_slice(&x_avg);
                        dev.policy.apply_into(i, steps, &dev_feat, &mut dev_u);
                        u0.iter_mut().zip(&dev_u).for_each(|(a, b)| *a += b);
                    }
                    AgentRole::Minor(_) => {
                        if agents > 0 {
                            dev_feat.extend_from_slice(&x[..n]);
                            dev_feat.extend_from_slice(&y);
                            dev_feat.extend_from_slice(&x0);
                            dev_feat.extend_from_slice(&x_avg);
                            dev.policy.apply_into(i, steps, &dev_feat, &mut dev_u);
                            u[..m].iter_mut().zip(&dev_u).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
        }

        u_avg.iter_mut().for_each(|v| *v = 0.0);
        if agents > 0 {
            for a in 0..agents {
                for c in 0..m {
                    u_avg[c] += u[a * m + c];
                }
            }
            u_avg.iter_mut().for_each(|v| *v /= agents as f64);
        }

        // costs at tᵢ
        let w = trapezoid_weight(i, steps, dt);
        z[..n].copy_from_slice(&y);
        z[n..].copy_from_slice(&x0);
        let c0 = &major.cost;
        cost0.running(w, &z, &u0, &c0.q, &c0.cross, &c0.r);
        if i == steps {
            cost0.terminal(&z, &c0.g);
        }
        for a in 0..agents {
            let c = &spec.minors[types[a]].cost;
            z[..n].copy_from_slice(&x[a * n..(a + 1) * n]);
            z[n..].copy_from_slice(&y);
            costs[a].running(w, &z, &u[a * m..(a + 1) * m], &c.q, &c.cross, &c.r);
            if i == steps {
                costs[a].terminal(&z, &c.g);
            }
        }

        let minor_sq = if agents > 0 { sq(&x) / agents as f64 } else { 0.0 };
        let avg_sq = match pop {
            Population::Finite(_) => sq(&x_avg),
            Population::MeanField => {
                let mut v = vec![0.0; n];
                for k in 0..kk {
                    for c in 0..n {
                        v[c] += spec.population.type_fractions[k] * xbar[k * n + c];
                    }
                }
                sq(&v)
            }
        };
        moments.push([minor_sq, avg_sq, sq(&xbar), sq(&y), sq(&x0)]);

        if let Some(rec) = rec.as_mut() {
            rec.y.extend_from_slice(&y);
            rec.x0.extend_from_slice(&x0);
            rec.u0.extend_from_slice(&u0);
            rec.x.extend_from_slice(&x);
            rec.u.extend_from_slice(&u);
            rec.xbar.extend_from_slice(&xbar);
            rec.x_avg.extend_from_slice(&x_avg);
            rec.u_avg.extend_from_slice(&u_avg);
        }

        if i == steps {
            break;
        }

        // impacts on y
        let mut impact = vec![0.0; n];
        gemv_acc(&mut impact, 1.0, &spec.common.f0, &u0);
        gemv_acc(&mut impact, 1.0, &spec.common.h0, &x0);
        match pop {
            Population::Finite(count) => {
                let inv = 1.0 / count as f64;
                for a in 0..agents {
                    let k = types[a];
                    gemv_acc(&mut impact, inv, &plan.fk[k], &u[a * m..(a + 1) * m]);
                    gemv_acc(&mut impact, inv, &plan.hk[k], &x[a * n..(a + 1) * n]);
                }
            }
            Population::MeanField => {
                let g = &plan.mf.gains;
                let mut ubar = rbar.clone();
                gemv_acc(&mut ubar, 1.0, &g.cbar[i], &xbar);
                gemv_acc(&mut ubar, 1.0, &g.dbar[i], &x0);
                gemv_acc(&mut ubar, 1.0, &g.ebar[i], &y);
                gemv_acc(&mut impact, 1.0, &plan.f_pi, &ubar);
                gemv_acc(&mut impact, 1.0, &plan.h_pi, &xbar);
            }
        }

        // x̄ using values at tᵢ
        let g = &plan.mf.gains;
        let mut dxbar = vec![0.0; n * kk];
        gemv_acc(&mut dxbar, 1.0, &g.abar[i], &xbar);
        gemv_acc(&mut dxbar, 1.0, &g.gbar[i], &x0);
        gemv_acc(&mut dxbar, 1.0, &g.lbar[i], &y);
        gemv_acc(&mut dxbar, 1.0, &plan.bbar, &rbar);
        for (k, t) in spec.minors.iter().enumerate() {
            for c in 0..n {
                dxbar[k * n + c] += t.dynamics.drift.at_step(i)[c];
            }
        }

        // major
        let mut dx0 = major.dynamics.drift.at_step(i).as_slice().to_vec();
        gemv_acc(&mut dx0, 1.0, &major.dynamics.a, &x0);
        gemv_acc(&mut dx0, 1.0, &major.dynamics.b, &u0);
        gaussian_into(&mut major_rng, sqdt, &mut noise);
        for c in 0..n {
            x0[c] += dx0[c] * dt;
        }
        gemv_acc(&mut x0, 1.0, &plan.sig0, &noise);

        // minors
        let mut dx = vec![0.0; n];
        for a in 0..agents {
            let t = &spec.minors[types[a]];
            dx.copy_from_slice(t.dynamics.drift.at_step(i).as_slice());
            let xa = &mut x[a * n..(a + 1) * n];
            gemv_acc(&mut dx, 1.0, &t.dynamics.a, xa);
            gemv_acc(&mut dx, 1.0, &t.dynamics.b, &u[a * m..(a + 1) * m]);
            gaussian_into(&mut minor_rng[a], sqdt, &mut noise);
            for c in 0..n {
                xa[c] += dx[c] * dt;
            }
            gemv_acc(xa, 1.0, &plan.sigk[types[a]], &noise);
        }

        let dyl = latent.dyl(i);
        for c in 0..n {
            y[c] += dyl[c] + impact[c] * dt;
        }
        for (v, d) in xbar.iter_mut().zip(&dxbar) {
            *v += d * dt;
        }

        let worst = sq(&x0).max(sq(&y)).max(sq(&xbar)).max(if agents > 0 { x.iter().fold(0.0, |a, v| a.max(v * v)) } else { 0.0 });
        if !worst.is_finite() || worst.sqrt() > UNSTABLE_NORM {
            return Err(Error::UnstableTrajectory { path, t: grid.time(i + 1) });
        }
    }

    let mut out = Vec::with_capacity(agents + 1);
    out.push((None, cost0.parts));
    for (a, c) in costs.iter().enumerate() {
        out.push((Some(types[a]), c.parts));
    }
    Ok(PathResult { costs: out, moments, record: rec })
}

fn summarize(label: String, values: &[(f64, CostParts)]) -> CostSummary {
    let count = values.len();
    if count == 0 {
        return CostSummary { label, count, mean: f64::NAN, stderr: f64::NAN, parts: CostParts::default() };
    }
    let mean = values.iter().map(|v| v.0).sum::<f64>() / count as f64;
    let var = if count > 1 {
        values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (count - 1) as f64
    } else {
        0.0
    };
    let mut parts = CostParts::default();
    for v in values {
        parts.add_scaled(&v.1, 1.0 / count as f64);
    }
    CostSummary { label, count, mean, stderr: (var / count as f64).sqrt(), parts }
}

fn moment_bound(per_path: &[Vec<[f64; 5]>], idx: usize) -> MomentBound {
    let paths = per_path.len();
    let len = per_path.first().map_or(0, |p| p.len());
    let mut best = MomentBound { sup: 0.0, stderr: 0.0 };
    for i in 0..len {
        let vals = per_path.iter().map(|p| p[i][idx]);
        let mean = vals.clone().sum::<f64>() / paths as f64;
        if mean >= best.sup {
            let var = if paths > 1 { vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (paths - 1) as f64 } else { 0.0 };
            best = MomentBound { sup: mean, stderr: (var / paths as f64).sqrt() };
        }
    }
    best
}

fn run(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    pop: Population,
    opts: &SimOptions,
    deviation: Option<Deviation<'_>>,
) -> Result<SimOutcome> {
    if let Population::Finite(0) = pop {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    if let Some(k) = opts.tagged_type {
        if k >= spec.types() {
            return Err(Error::Config(format!("tagged type {k} does not exist")));
        }
    }
    let plan = Plan::new(spec, mf, est)?;
    let results: Vec<PathResult> = map_indexed(opts.paths, |p| simulate_path(&plan, pop, p, opts, deviation))
        .into_iter()
        .collect::<Result<_>>()?;

    let kk = spec.types();
    let mut records = Vec::new();
    let mut major = Vec::with_capacity(results.len());
    let mut by_type: Vec<Vec<(f64, CostParts)>> = vec![Vec::new(); kk];
    let mut all = Vec::with_capacity(results.len());
    for (p, res) in results.iter().enumerate() {
        let mut sums = vec![(0.0, CostParts::default(), 0usize); kk];
        let mut tot = (0.0, CostParts::default(), 0usize);
        for (a, (ty, parts)) in res.costs.iter().enumerate() {
            records.push(AgentCost { path: p, agent: a, ty: *ty, total: parts.total(), parts: *parts });
            match ty {
                None => major.push((parts.total(), *parts)),
                Some(k) => {
                    sums[*k].0 += parts.total();
                    sums[*k].1.add_scaled(parts, 1.0);
                    sums[*k].2 += 1;
                    tot.0 += parts.total();
                    tot.1.add_scaled(parts, 1.0);
                    tot.2 += 1;
                }
            }
        }
        for (k, (sum, parts, cnt)) in sums.into_iter().enumerate() {
            if cnt > 0 {
                let mut avg = CostParts::default();
                avg.add_scaled(&parts, 1.0 / cnt as f64);
                by_type[k].push((sum / cnt as f64, avg));
            }
        }
        if tot.2 > 0 {
            let mut avg = CostParts::default();
            avg.add_scaled(&tot.1, 1.0 / tot.2 as f64);
            all.push((tot.0 / tot.2 as f64, avg));
        }
    }
    let population = match pop {
        Population::Finite(count) => Some(count),
        Population::MeanField => None,
    };
    let report = CostReport {
        population,
        paths: opts.paths,
        major: summarize("major".into(), &major),
        minor_by_type: by_type.iter().enumerate().map(|(k, v)| summarize(format!("minor[{k}]"), v)).collect(),
        minor_all: summarize("minor".into(), &all),
        records,
    };
    let per_path: Vec<Vec<[f64; 5]>> = results.iter().map(|r| r.moments.clone()).collect();
    let moments = MomentReport {
        population,
        minor_state: moment_bound(&per_path, 0),
        empirical_mean: moment_bound(&per_path, 1),
        mean_field: moment_bound(&per_path, 2),
        common: moment_bound(&per_path, 3),
        major_state: moment_bound(&per_path, 4),
    };
    let paths = results.into_iter().filter_map(|r| r.record).collect();
    Ok(SimOutcome { report, moments, paths })
}

/// `N`-agent system under the equilibrium laws.
pub fn simulate_finite(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    population: usize,
    opts: &SimOptions,
) -> Result<SimOutcome> {
    run(spec, mf, est, Population::Finite(population), opts, None)
}

/// As [`simulate_finite`], with one agent deviating.
pub fn simulate_finite_with(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    population: usize,
    opts: &SimOptions,
    deviation: Option<Deviation<'_>>,
) -> Result<SimOutcome> {
    run(spec, mf, est, Population::Finite(population), opts, deviation)
}

/// Infinite-population system with one representative minor agent per type.
pub fn simulate_meanfield(
    spec: &ModelSpec,
    mf: &MeanFieldGains,
    est: &OffsetEstimator,
    opts: &SimOptions,
) -> Result<SimOutcome> {
    run(spec, mf, est, Population::MeanField, opts, None)
}

/// Recomputes every agent's cost from a recorded path.
pub fn replay_costs(spec: &ModelSpec, rec: &SimPath) -> Vec<CostParts> {
    let (n, m) = (spec.dims.n, spec.dims.m);
    let steps = spec.grid.steps;
    let dt = spec.grid.dt();
    let mut c0 = CostAccumulator::default();
    let mut cs = vec![CostAccumulator::default(); rec.agents];
    let mut z = vec![0.0; 2 * n];
    for i in 0..=steps {
        let w = trapezoid_weight(i, steps, dt);
        let y = &rec.y[i * n..(i + 1) * n];
        z[..n].copy_from_slice(y);
        z[n..].copy_from_slice(&rec.x0[i * n..(i + 1) * n]);
        let c = &spec.major.cost;
        c0.running(w, &z, &rec.u0[i * m..(i + 1) * m], &c.q, &c.cross, &c.r);
        if i == steps {
            c0.terminal(&z, &c.g);
        }
        for (a, acc) in cs.iter_mut().enumerate() {
            let c = &spec.minors[rec.types[a]].cost;
            let base = i * rec.agents;
            z[..n].copy_from_slice(&rec.x[(base + a) * n..(base + a + 1) * n]);
            z[n..].copy_from_slice(y);
            acc.running(w, &z, &rec.u[(base + a) * m..(base + a + 1) * m], &c.q, &c.cross, &c.r);
            if i == steps {
                acc.terminal(&z, &c.g);
            }
        }
    }
    std::iter::once(c0.parts).chain(cs.into_iter().map(|c| c.parts)).collect()
}

/// Paired estimate of `J^N − J^∞` for one class (`None` for the major agent).
///
/// Both reports must come from the same seed so that path `p` shares its
/// chain, latent noise and major-agent noise. Each path contributes its class
/// average minus the mean-field representative's cost; paths without an agent
/// of the class are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostGap {
    pub diff: f64,
    pub stderr: f64,
    pub paths: usize,
}

pub fn paired_cost_gap(finite: &CostReport, meanfield: &CostReport, class: Option<usize>) -> CostGap {
    let per_path = |rep: &CostReport| {
        let mut sums = vec![(0.0, 0usize); rep.paths];
        for r in rep.records.iter().filter(|r| r.ty == class) {
            sums[r.path].0 += r.total;
            sums[r.path].1 += 1;
        }
        sums
    };
    let (a, b) = (per_path(finite), per_path(meanfield));
    let diffs: Vec<f64> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 > 0 && y.1 > 0)
        .map(|(x, y)| x.0 / x.1 as f64 - y.0 / y.1 as f64)
        .collect();
    let paths = diffs.len();
    if paths == 0 {
        return CostGap { diff: f64::NAN, stderr: f64::NAN, paths };
    }
    let diff = diffs.iter().sum::<f64>() / paths as f64;
    let var = if paths > 1 { diffs.iter().map(|d| (d - diff).powi(2)).sum::<f64>() / (paths - 1) as f64 } else { 0.0 };
    CostGap { diff, stderr: (var / paths as f64).sqrt(), paths }
}
