use latent_mfg::meanfield::{solve_consistency, ConsistencyOptions, MeanFieldGains};
use latent_mfg::model::{ModelSpec, ScalarParams};
use latent_mfg::offset::{solve_joint_offsets, OffsetEstimator, OffsetOptions};
use latent_mfg::sim::{replay_costs, simulate_finite, simulate_meanfield, SimOptions};
use nalgebra::{DMatrix, DVector};

fn solve(spec: &ModelSpec, paths: usize) -> (MeanFieldGains, OffsetEstimator) {
    let mf = solve_consistency(spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(spec, &mf, &OffsetOptions { paths, degree: 1, seed: 1, ..Default::default() }).unwrap();
    (mf, est)
}

fn deterministic_reference(steps: usize) -> ScalarParams {
    let mut p = ScalarParams::coupled_reference();
    p.steps = steps;
    p.chain_states = vec![0.5];
    p.rates = vec![vec![0.0]];
    p.chain_initial = vec![1.0];
    p.common_sigma = 0.0;
    for a in std::iter::once(&mut p.major).chain(p.minors.iter_mut()) {
        a.sigma = 0.0;
        a.init_std = 0.0;
    }
    p
}

#[test]
fn zero_model_stays_at_rest() {
    let mut p = ScalarParams { common_sigma: 0.0, ..Default::default() };
    p.major.q = [[1.0, 0.0], [0.0, 1.0]];
    let spec = p.build().unwrap();
    let (mf, est) = solve(&spec, 40);
    let out = simulate_finite(&spec, &mf, &est, 1, &SimOptions { paths: 3, seed: 5, record: true, tagged_type: None }).unwrap();
    for path in &out.paths {
        assert!(path.x.iter().chain(&path.x0).chain(&path.y).chain(&path.u).all(|&v| v == 0.0));
    }
    assert!(out.report.records.iter().all(|r| r.total == 0.0));
}

/// `½XᵀΠX + sᵀX + φ` with `−φ̇ = sᵀ𝕄 − ½sᵀ𝔹R⁻¹𝔹ᵀs`, integrated by the trapezoid rule.
fn value_functions(spec: &ModelSpec, mf: &MeanFieldGains, est: &OffsetEstimator) -> (f64, Vec<f64>) {
    let n = spec.dims.n;
    let kk = spec.types();
    let grid = spec.grid;
    let fhat = spec.common.drift(&spec.chain, 0, &spec.common.y0, 0);
    let gram0 = &mf.major.b * &mf.major.r_inv * mf.major.b.transpose();
    let gramk: Vec<DMatrix<f64>> = mf.minors.iter().map(|s| &s.b * &s.r_inv * s.b.transpose()).collect();
    let integrands = |i: usize| {
        let off = est.split(&est.evaluate_step(i, spec.common.y0.as_slice(), &[1.0]));
        let mut rbar = DVector::zeros(spec.dims.m * kk);
        for k in 0..kk {
            let t = &spec.minors[k];
            let rk = -(t.cost.r.clone().try_inverse().unwrap()) * t.dynamics.b.transpose() * off.sbar[k].rows(0, n);
            rbar.rows_mut(k * spec.dims.m, spec.dims.m).copy_from(&rk);
        }
        let m0 = mf.major.forcing(i, &fhat, &rbar);
        let major = off.s0.dot(&m0) - 0.5 * (off.s0.transpose() * &gram0 * &off.s0)[0];
        let minors: Vec<f64> = (0..kk)
            .map(|k| {
                let mk = mf.minors[k].forcing(i, &m0, &gram0, &off.s0);
                off.sbar[k].dot(&mk) - 0.5 * (off.sbar[k].transpose() * &gramk[k] * &off.sbar[k])[0]
            })
            .collect();
        (major, minors)
    };
    let h = grid.dt();
    let mut phi0 = 0.0;
    let mut phik = vec![0.0; kk];
    for i in 0..grid.steps {
        let (a0, ak) = integrands(i);
        let (b0, bk) = integrands(i + 1);
        phi0 += 0.5 * h * (a0 + b0);
        for k in 0..kk {
            phik[k] += 0.5 * h * (ak[k] + bk[k]);
        }
    }
    let off = est.split(&est.evaluate_step(0, spec.common.y0.as_slice(), &[1.0]));
    let mut x0 = DVector::zeros(spec.major_ext_dim());
    x0[0] = spec.common.y0[0];
    x0[1] = spec.major.initial.mean[0];
    for k in 0..kk {
        x0[2 + k] = spec.minors[k].initial.mean[0];
    }
    let v0 = 0.5 * (x0.transpose() * &mf.pi0.values[0] * &x0)[0] + off.s0.dot(&x0) + phi0;
    let vk = (0..kk)
        .map(|k| {
            let mut xk = DVector::zeros(spec.minor_ext_dim());
            xk[0] = spec.minors[k].initial.mean[0];
            xk.rows_mut(1, x0.len()).copy_from(&x0);
            0.5 * (xk.transpose() * &mf.pik[k].values[0] * &xk)[0] + off.sbar[k].dot(&xk) + phik[k]
        })
        .collect();
    (v0, vk)
}

#[test]
fn deterministic_costs_match_value_function() {
    let costs = |steps: usize| {
        let spec = deterministic_reference(steps).build().unwrap();
        let (mf, est) = solve(&spec, 40);
        let out = simulate_meanfield(&spec, &mf, &est, &SimOptions { paths: 1, seed: 0, record: false, tagged_type: None }).unwrap();
        let (v0, vk) = value_functions(&spec, &mf, &est);
        let sim: Vec<f64> = std::iter::once(out.report.major.mean)
            .chain(out.report.minor_by_type.iter().map(|s| s.mean))
            .collect();
        let oracle: Vec<f64> = std::iter::once(v0).chain(vk).collect();
        (sim, oracle)
    };
    // Euler is first order: extrapolate from two grids before comparing.
    let (coarse, oracle) = costs(1000);
    let (fine, oracle_fine) = costs(2000);
    for j in 0..coarse.len() {
        assert!((oracle[j] - oracle_fine[j]).abs() < 1e-6, "oracle moved with the grid");
        let extrapolated = 2.0 * fine[j] - coarse[j];
        let err = (extrapolated - oracle_fine[j]).abs() / oracle_fine[j].abs();
        println!("agent {j}: coarse {} fine {} extrapolated {extrapolated} value {}", coarse[j], fine[j], oracle_fine[j]);
        assert!(err < 1e-4, "agent {j}: relative error {err:e}");
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 200);
    let opts = SimOptions { paths: 20, seed: 77, record: true, tagged_type: None };
    let a = simulate_finite(&spec, &mf, &est, 5, &opts).unwrap();
    let b = simulate_finite(&spec, &mf, &est, 5, &opts).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.moments, b.moments);
    assert_eq!(a.paths, b.paths);
    let c = simulate_finite(&spec, &mf, &est, 5, &SimOptions { seed: 78, ..opts }).unwrap();
    assert_ne!(a.report.major.mean, c.report.major.mean);
}

#[test]
fn replay_reproduces_costs_and_averages() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 200);
    let out = simulate_finite(&spec, &mf, &est, 7, &SimOptions { paths: 4, seed: 3, record: true, tagged_type: None }).unwrap();
    for path in &out.paths {
        let replayed = replay_costs(&spec, path);
        let recorded: Vec<_> = out.report.records.iter().filter(|r| r.path == path.path).collect();
        assert_eq!(replayed.len(), recorded.len());
        for (r, c) in recorded.iter().zip(&replayed) {
            assert_eq!(r.parts, *c);
            assert!((r.total - c.total()).abs() <= 1e-10);
        }
        for i in 0..spec.grid.len() {
            let xs = &path.x[i * 7..(i + 1) * 7];
            let avg = xs.iter().sum::<f64>() / 7.0;
            assert_eq!(avg, path.x_avg[i]);
        }
    }
}

#[test]
fn common_process_follows_its_euler_recursion() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 200);
    let n_agents = 4;
    let out = simulate_finite(&spec, &mf, &est, n_agents, &SimOptions { paths: 2, seed: 9, record: true, tagged_type: None }).unwrap();
    let dt = spec.grid.dt();
    let (f, h) = (&spec.common.f, &spec.common.h);
    for p in &out.paths {
        for i in 0..spec.grid.steps {
            let mut impact = spec.common.f0[(0, 0)] * p.u0[i] + spec.common.h0[(0, 0)] * p.x0[i];
            for a in 0..n_agents {
                let k = p.types[a];
                impact += (f[(0, k)] * p.u[i * n_agents + a] + h[(0, k)] * p.x[i * n_agents + a]) / n_agents as f64;
            }
            let expected = p.y[i] + (p.yl[i + 1] - p.yl[i]) + impact * dt;
            assert!((p.y[i + 1] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn tagged_type_pins_agent_zero_only() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 200);
    let free = simulate_finite(&spec, &mf, &est, 6, &SimOptions { paths: 10, seed: 2, record: true, tagged_type: None }).unwrap();
    let pinned = simulate_finite(&spec, &mf, &est, 6, &SimOptions { paths: 10, seed: 2, record: true, tagged_type: Some(1) }).unwrap();
    for (a, b) in free.paths.iter().zip(&pinned.paths) {
        assert_eq!(b.types[0], 1);
        assert_eq!(a.types[1..], b.types[1..]);
        assert_eq!(a.chain, b.chain);
    }
    assert!(simulate_finite(&spec, &mf, &est, 6, &SimOptions { tagged_type: Some(2), ..Default::default() }).is_err());
    assert!(simulate_finite(&spec, &mf, &est, 0, &SimOptions::default()).is_err());
}

#[test]
fn empirical_average_approaches_mean_field() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 400);
    let sup_gap = |n: usize| {
        let out = simulate_finite(&spec, &mf, &est, n, &SimOptions { paths: 40, seed: 11, record: true, tagged_type: None }).unwrap();
        let fr = &spec.population.type_fractions;
        let mut total = 0.0;
        for p in &out.paths {
            let mut worst: f64 = 0.0;
            for i in 0..spec.grid.len() {
                let target = fr[0] * p.xbar[2 * i] + fr[1] * p.xbar[2 * i + 1];
                worst = worst.max((p.x_avg[i] - target).abs());
            }
            total += worst;
        }
        total / out.paths.len() as f64
    };
    let (g50, g500) = (sup_gap(50), sup_gap(500));
    println!("sup gap N=50 {g50:.4}, N=500 {g500:.4}");
    assert!(g500 < 0.6 * g50, "N=50 {g50}, N=500 {g500}");
}

#[test]
fn decoupled_mean_field_matches_closed_form_ode() {
    // dx̄ = (a − b²p/r)x̄ − (b²/r)s, −ṗ = 2ap − b²p²/r + q, −ṡ = (a − b²p/r)s, p(T) = g.
    let run = |steps: usize| {
        let mut p = ScalarParams::decoupled();
        p.steps = steps;
        p.common_sigma = 0.0;
        p.major.sigma = 0.0;
        p.minors[0].sigma = 0.0;
        p.minors[0].init_std = 0.0;
        p.major.init_std = 0.0;
        let spec = p.build().unwrap();
        let (mf, est) = solve(&spec, 40);
        assert!(mf.gains.gbar.iter().chain(&mf.gains.lbar).all(|m| m.iter().all(|&v| v == 0.0)));
        let out = simulate_meanfield(&spec, &mf, &est, &SimOptions { paths: 1, seed: 0, record: true, tagged_type: None }).unwrap();
        (p, out.paths[0].xbar.clone())
    };
    let (p, coarse) = run(1000);
    let (_, fine) = run(2000);
    let m = &p.minors[0];
    let (a, b, r, q, g) = (m.a, m.b, m.r, m.q[0][0], m.g[0][0]);
    let sub = 20;
    let h = p.horizon / (1000 * sub) as f64;
    let total = 1000 * sub;
    let dp = |x: f64| 2.0 * a * x - b * b * x * x / r + q;
    let mut pv = vec![0.0; total + 1];
    pv[total] = g;
    for i in (0..total).rev() {
        let x = pv[i + 1];
        let k1 = dp(x);
        let k2 = dp(x + 0.5 * h * k1);
        let k3 = dp(x + 0.5 * h * k2);
        let k4 = dp(x + h * k3);
        pv[i] = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    // s ≡ 0 here since there is no forcing; the mean is a pure linear ODE.
    let mut xb = m.init_mean;
    let mut worst: f64 = 0.0;
    for i in 0..total {
        if i % sub == 0 {
            let c = i / sub;
            let ext = 2.0 * fine[2 * c] - coarse[c];
            worst = worst.max((ext - xb).abs());
        }
        let f = |x: f64, pp: f64| (a - b * b * pp / r) * x;
        let pm = 0.5 * (pv[i] + pv[i + 1]);
        let k1 = f(xb, pv[i]);
        let k2 = f(xb + 0.5 * h * k1, pm);
        let k3 = f(xb + 0.5 * h * k2, pm);
        let k4 = f(xb + h * k3, pv[i + 1]);
        xb += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    println!("extrapolated x̄ error {worst:e}");
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn moments_are_finite_and_consistent() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let (mf, est) = solve(&spec, 200);
    let out = simulate_finite(&spec, &mf, &est, 10, &SimOptions { paths: 50, seed: 4, record: false, tagged_type: None }).unwrap();
    let m = out.moments;
    for b in [m.minor_state, m.empirical_mean, m.mean_field, m.common, m.major_state] {
        assert!(b.sup.is_finite() && b.sup >= 0.0 && b.stderr >= 0.0);
    }
    assert!(m.minor_state.sup >= m.empirical_mean.sup * 0.5);
    let r = &out.report;
    assert_eq!(r.records.len(), 50 * 11);
    for s in std::iter::once(&r.major).chain(&r.minor_by_type).chain(std::iter::once(&r.minor_all)) {
        assert!((s.parts.total() - s.mean).abs() <= 1e-10 * (1.0 + s.mean.abs()));
    }
}
