mod common;

use latent_mfg::meanfield::{solve_consistency, ConsistencyOptions};
use latent_mfg::model::ScalarParams;
use latent_mfg::offset::{martingale_diagnostic, solve_joint_offsets, OffsetOptions};

fn single_state_reference() -> ScalarParams {
    let mut p = ScalarParams::coupled_reference();
    p.chain_states = vec![0.5];
    p.rates = vec![vec![0.0]];
    p.chain_initial = vec![1.0];
    p
}

#[test]
fn single_state_chain_matches_deterministic_ode() {
    let spec = single_state_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 200, degree: 2, seed: 4, ..Default::default() }).unwrap();
    let oracle = common::deterministic_offsets(&spec, &mf);
    let scale = oracle.iter().map(|s| s.amax()).fold(0.0, f64::max);
    assert!(scale > 1e-2, "oracle is trivially small: {scale}");
    let mut worst: f64 = 0.0;
    for (i, exact) in oracle.iter().enumerate() {
        let s = est.evaluate_step(i, &[0.3], &[1.0]);
        worst = worst.max((s - exact).amax() / scale);
    }
    println!("relative error {worst:e}");
    assert!(worst < 1e-4, "relative error {worst:e}");
}

#[test]
fn chain_driven_offsets_match_linear_in_posterior_solution() {
    use latent_mfg::offset::build_offset_system;
    use nalgebra::{DMatrix, DVector};
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 10_000, degree: 2, seed: 8, ..Default::default() }).unwrap();

    // S = α + βπ with −α̇ = 𝒜α + c, −β̇ = 𝒜β + βQᵀ + P·[γ₁ … γ_M]
    let sys = build_offset_system(&spec, &mf);
    let qt = spec.chain.generator().transpose();
    let gam = spec.chain.state_matrix();
    let dim = sys.dim();
    let mm = spec.chain.len();
    let h = spec.grid.dt();
    let mut alpha = DVector::zeros(dim);
    let mut beta = DMatrix::zeros(dim, mm);
    let mut table = vec![(alpha.clone(), beta.clone()); spec.grid.len()];
    for i in (0..spec.grid.steps).rev() {
        let at = |w: f64| (&sys.a[i] * w + &sys.a[i + 1] * (1.0 - w), &sys.c[i] * w + &sys.c[i + 1] * (1.0 - w), &sys.p[i] * w + &sys.p[i + 1] * (1.0 - w));
        let fa = |x: &DVector<f64>, c: &(DMatrix<f64>, DVector<f64>, DMatrix<f64>)| &c.0 * x + &c.1;
        let fb = |x: &DMatrix<f64>, c: &(DMatrix<f64>, DVector<f64>, DMatrix<f64>)| &c.0 * x + x * &qt + &c.2 * &gam;
        let (c1, c2, c3) = (at(0.0), at(0.5), at(1.0));
        let k1 = fa(&alpha, &c1);
        let k2 = fa(&(&alpha + &k1 * (0.5 * h)), &c2);
        let k3 = fa(&(&alpha + &k2 * (0.5 * h)), &c2);
        let k4 = fa(&(&alpha + &k3 * h), &c3);
        alpha += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let k1 = fb(&beta, &c1);
        let k2 = fb(&(&beta + &k1 * (0.5 * h)), &c2);
        let k3 = fb(&(&beta + &k2 * (0.5 * h)), &c2);
        let k4 = fb(&(&beta + &k3 * h), &c3);
        beta += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        table[i] = (alpha.clone(), beta.clone());
    }
    let scale = table.iter().map(|(a, b)| a.amax() + b.amax()).fold(0.0, f64::max);
    let basis = est.basis.clone();
    let probe = latent_mfg::offset::sample_paths(&spec, &basis, 200, 99).unwrap();
    let mut worst: f64 = 0.0;
    for i in (0..spec.grid.steps).step_by(5) {
        let mut err = 0.0;
        for path in &probe {
            let raw = path.raw_at(i);
            let pi = DVector::from_vec(vec![raw[1], 1.0 - raw[1]]);
            let exact = &table[i].0 + &table[i].1 * &pi;
            let s = est.evaluate_step(i, &raw[..1], pi.as_slice());
            err += (s - exact).amax() / scale;
        }
        worst = worst.max(err / probe.len() as f64);
    }
    let s0 = est.evaluate_step(0, &[0.0], &[0.5, 0.5]);
    let exact0 = &table[0].0 + &table[0].1 * DVector::from_vec(vec![0.5, 0.5]);
    for d in 0..dim {
        let band = 4.0 * est.s0_stderr[d] + 2e-3 * scale;
        assert!((s0[d] - exact0[d]).abs() < band, "component {d}: {} vs {}", s0[d], exact0[d]);
    }
    println!("relative gap {worst:e}");
    assert!(worst < 2e-2, "relative gap {worst:e}");
}

#[test]
fn martingale_residuals_are_centred() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 10_000, degree: 2, seed: 21, ..Default::default() }).unwrap();
    let rep = martingale_diagnostic(&spec, &mf, &est, 1_000, 21).unwrap();
    println!("pass fraction {} {:?}", rep.pass_fraction(), rep.worst_z);
    assert!(rep.pass_fraction() >= 0.95);
}

#[test]
fn zero_forcing_gives_zero_offsets() {
    let spec = ScalarParams::decoupled().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 100, ..Default::default() }).unwrap();
    for i in 0..spec.grid.len() {
        assert!(est.evaluate_step(i, &[0.7], &[1.0]).amax() < 1e-14);
    }
}

#[test]
fn terminal_value_is_exactly_zero() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 500, ..Default::default() }).unwrap();
    let end = est.evaluate(spec.grid.horizon, &[3.0], &[0.1, 0.9]).unwrap();
    assert!(end.s0.iter().chain(end.sbar.iter().flat_map(|v| v.iter())).all(|&x| x == 0.0));
    assert!(matches!(est.evaluate(0.0123, &[0.0], &[0.5, 0.5]), Err(latent_mfg::Error::OffGrid { .. })));
}

#[test]
fn single_state_estimate_ignores_posterior_argument() {
    let spec = single_state_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 100, ..Default::default() }).unwrap();
    assert_eq!(est.evaluate_step(10, &[0.2], &[1.0]), est.evaluate_step(10, &[0.2], &[0.3]));
}

#[test]
fn small_budgets_and_collinearity_are_reported() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let r = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 59, ..Default::default() });
    assert!(matches!(r, Err(latent_mfg::Error::PathBudgetTooSmall { paths: 59, features: 6 })));
    // after one step the posterior is an exact function of yᴸ
    let strict = OffsetOptions { paths: 200, strict_rank: true, ..Default::default() };
    let r = solve_joint_offsets(&spec, &mf, &strict);
    assert!(matches!(r, Err(latent_mfg::Error::RankDeficientRegression { .. })));
}

#[test]
fn estimator_survives_json_round_trip() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let est = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 300, ..Default::default() }).unwrap();
    let text = serde_json::to_string(&est).unwrap();
    let back: latent_mfg::OffsetEstimator = serde_json::from_str(&text).unwrap();
    assert_eq!(back, est);
}

#[test]
fn doubling_paths_stays_inside_error_band() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let a = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 4_000, seed: 1, ..Default::default() }).unwrap();
    let b = solve_joint_offsets(&spec, &mf, &OffsetOptions { paths: 8_000, seed: 2, ..Default::default() }).unwrap();
    let (sa, sb) = (a.evaluate_step(0, &[0.0], &[0.5, 0.5]), b.evaluate_step(0, &[0.0], &[0.5, 0.5]));
    for d in 0..sa.len() {
        let band = 3.0 * (a.s0_stderr[d].powi(2) + b.s0_stderr[d].powi(2)).sqrt() + 1e-12;
        assert!((sa[d] - sb[d]).abs() <= band, "component {d}: {} vs {} (band {band})", sa[d], sb[d]);
    }
}
