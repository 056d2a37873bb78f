use latent_mfg::grid::TimeGrid;
use latent_mfg::latent::{simulate_chain, simulate_latent};
use latent_mfg::linalg::sym_eigenvalues;
use latent_mfg::meanfield::{solve_consistency, ConsistencyOptions};
use latent_mfg::model::{type_weighted, ScalarParams};
use latent_mfg::riccati::solve_backward;
use latent_mfg::rng::{stream, Stream};
use latent_mfg::sim::{control_major, control_minor, CostAccumulator};
use latent_mfg::WonhamFilter;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

fn psd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n).prop_map(|l| &l * l.transpose())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn riccati_stays_symmetric_psd(a in matrix(2, 2), b in matrix(2, 1), q in psd(2), g in psd(2), r in 0.2..2.0f64) {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let sol = solve_backward(&a, &b, &q, &DMatrix::zeros(2, 1), &DMatrix::from_element(1, 1, r), &g, &grid).unwrap();
        for p in &sol.values {
            prop_assert_eq!(p, &p.transpose());
            prop_assert!(sym_eigenvalues(p)[0] >= -1e-9);
        }
    }

    #[test]
    fn posterior_stays_on_simplex(g1 in -3.0..3.0f64, g2 in -3.0..3.0f64, v12 in 0.0..5.0f64, v21 in 0.0..5.0f64, sigma in 0.2..2.0f64, seed in 0u64..1000) {
        let spec = ScalarParams {
            chain_states: vec![g1, g2],
            rates: vec![vec![0.0, v12], vec![v21, 0.0]],
            chain_initial: vec![0.5, 0.5],
            common_sigma: sigma,
            ..Default::default()
        }.build().unwrap();
        let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(seed, 0, Stream::Chain));
        let latent = simulate_latent(&spec, chain, &mut stream(seed, 0, Stream::Latent));
        let filt = WonhamFilter::new(&spec).unwrap().run(&latent).unwrap();
        for i in 0..spec.grid.len() {
            let p = filt.pi_at(i);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn type_weighting_scales_column_blocks(m in matrix(2, 6), w0 in 0.0..1.0f64) {
        let fr = DVector::from_vec(vec![w0, 1.0 - w0, 0.0]);
        let out = type_weighted(&m, &fr, 2).unwrap();
        for c in 0..6 {
            for r in 0..2 {
                prop_assert_eq!(out[(r, c)], m[(r, c)] * fr[c / 2]);
            }
        }
    }

    #[test]
    fn cost_parts_sum_to_direct_quadratic(z in prop::collection::vec(-2.0..2.0f64, 2), u in -2.0..2.0f64, q in psd(2), n in matrix(2, 1), r in 0.1..2.0f64, w in 0.0..0.1f64) {
        let rm = DMatrix::from_element(1, 1, r);
        let mut acc = CostAccumulator::default();
        acc.running(w, &z, &[u], &q, &n, &rm);
        let zv = DVector::from_column_slice(&z);
        let direct = 0.5 * w * ((zv.transpose() * &q * &zv)[0] + 2.0 * (zv.transpose() * &n)[0] * u + r * u * u);
        prop_assert!((acc.parts.total() - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }
}

#[test]
fn major_control_direct_substitution() {
    // scalar model with Π₀ = 1, X = 2, s = 0, B = R = 1, ℕ = 0 gives u = −2
    let spec = ScalarParams { major: latent_mfg::model::ScalarAgent { q: [[0.0; 2]; 2], ..Default::default() }, ..Default::default() }
        .build()
        .unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let d0 = spec.major_ext_dim();
    let mut pi0 = DMatrix::zeros(d0, d0);
    pi0[(1, 1)] = 1.0;
    let mut x = DVector::zeros(d0);
    x[1] = 2.0;
    let u = control_major(&x, &pi0, &DVector::zeros(d0), &mf);
    assert_eq!(u[0], -2.0);
    assert_eq!(control_major(&x, &DMatrix::zeros(d0, d0), &DVector::zeros(d0), &mf)[0], 0.0);
}

#[test]
fn controls_match_an_independent_evaluation() {
    let spec = ScalarParams::coupled_reference().build().unwrap();
    let mf = solve_consistency(&spec, &ConsistencyOptions::default()).unwrap();
    let d0 = spec.major_ext_dim();
    let dk = spec.minor_ext_dim();
    let mut state = 17u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    for _ in 0..20 {
        let x0 = DVector::from_fn(d0, |_, _| next());
        let s0 = DVector::from_fn(d0, |_, _| next());
        let p0 = DMatrix::from_fn(d0, d0, |_, _| next());
        // u = −(1/R₀)(ℕ₀ᵀX + 𝔹₀ᵀ(ΠX + s)); scalar R₀ = 1, 𝔹₀ = [F₀; B₀; 0], ℕ₀ = 0
        let px = &p0 * &x0 + &s0;
        let expect = -(spec.common.f0[(0, 0)] * px[0] + spec.major.dynamics.b[(0, 0)] * px[1]) / spec.major.cost.r[(0, 0)];
        let u = control_major(&x0, &p0, &s0, &mf);
        assert!((u[0] - expect).abs() < 1e-12);
        for k in 0..2 {
            let x = DVector::from_fn(dk, |_, _| next());
            let s = DVector::from_fn(dk, |_, _| next());
            let p = DMatrix::from_fn(dk, dk, |_, _| next());
            let t = &spec.minors[k];
            let px = &p * &x + &s;
            let expect = -(t.dynamics.b[(0, 0)] * px[0]) / t.cost.r[(0, 0)];
            assert!((control_minor(k, &x, &p, &s, &mf)[0] - expect).abs() < 1e-12);
        }
    }
}
