use std::path::PathBuf;

use latent_mfg::meanfield::GainTrajectory;
use latent_mfg::model::{build_extended_major, build_extended_minor, load_model, validate, ModelSpec, ScalarParams};
use latent_mfg::riccati::solve_backward_varying;
use latent_mfg::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

#[test]
fn bundled_models_equal_presets() {
    assert_eq!(load_model(bundled("decoupled.toml")).unwrap(), ScalarParams::decoupled().build().unwrap());
    assert_eq!(load_model(bundled("coupled_reference.toml")).unwrap(), ScalarParams::coupled_reference().build().unwrap());
    for name in ["decoupled.toml", "coupled_reference.toml"] {
        assert!(validate(&load_model(bundled(name)).unwrap()).unwrap().passed());
    }
}

#[test]
fn indefinite_terminal_weight_is_a_convexity_violation() {
    let spec = load_model(bundled("g_violating.toml")).unwrap();
    match validate(&spec) {
        Err(Error::ConvexityViolation { check, eigenvalue }) => {
            assert_eq!(check, "minor[0].G >= 0");
            assert!((eigenvalue + 0.5).abs() < 1e-12);
        }
        other => panic!("expected a convexity violation, got {other:?}"),
    }
}

const TWO_DIM: &str = r#"
[dims]
n = 2
m = 2
r = 2
types = 2
chain_states = 2

[grid]
horizon = 1.0
steps = 4

[major]
a = [[0.1, 0.2], [0.3, 0.4]]
b = [[1.0, 0.5], [0.0, 1.0]]
sigma = [[0.3, 0.0], [0.1, 0.2]]
drift = { kind = "constant", value = [0.1, -0.2] }
[major.cost]
q = [[2, 0, 0.1, 0], [0, 2, 0, 0.2], [0.1, 0, 1, 0], [0, 0.2, 0, 1]]
g = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
cross = [[0.1, 0], [0, 0.1], [0, 0], [0.05, 0]]
r = [[1, 0], [0, 2]]

[[minor]]
a = [[-0.1, 0.0], [0.5, 0.2]]
b = [[1.0, 0.0], [0.0, 2.0]]
sigma = [[0.2, 0.0], [0.0, 0.2]]
[minor.cost]
q = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
g = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]
r = [[1, 0], [0, 1]]

[[minor]]
a = [[0.0, 1.0], [-1.0, 0.0]]
b = [[0.5, 0.1], [0.0, 0.7]]
sigma = [[0.1, 0.0], [0.0, 0.3]]
[minor.cost]
q = [[1, 0, 0.2, 0], [0, 1, 0, 0], [0.2, 0, 1, 0], [0, 0, 0, 1]]
g = [[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]
r = [[2, 0], [0, 1]]

[chain]
states = [[1, 0], [0, -1]]
rates = [[0, 1], [2, 0]]
initial = [0.3, 0.7]

[common]
sigma = [[0.5, 0], [0, 0.5]]
f = [[1, 2, 3, 4], [5, 6, 7, 8]]
f0 = [[0.5, 0], [0, 0.5]]
h = [[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]]
h0 = [[0.2, 0], [0, 0.2]]

[population]
type_fractions = [0.25, 0.75]
n_schedule = [3]
"#;

fn two_dim() -> ModelSpec {
    let dir = std::env::temp_dir().join(format!("latent-mfg-model-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("two_dim.toml");
    std::fs::write(&path, TWO_DIM).unwrap();
    load_model(&path).unwrap()
}

fn random_gains(spec: &ModelSpec, seed: u64) -> GainTrajectory {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (n, m, k) = (spec.dims.n, spec.dims.m, spec.types());
    let mut mk = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let len = spec.grid.len();
    let cbar = (0..len).map(|_| mk(m * k, n * k)).collect();
    let dbar = (0..len).map(|_| mk(m * k, n)).collect();
    let ebar = (0..len).map(|_| mk(m * k, n)).collect();
    GainTrajectory::from_cde(spec, cbar, dbar, ebar)
}

#[test]
fn extended_major_blocks_follow_the_state_ordering() {
    let spec = two_dim();
    validate(&spec).unwrap();
    let gains = random_gains(&spec, 3);
    let sys = build_extended_major(&spec, &gains).unwrap();
    let (n, m, kk) = (2, 2, 2);
    let fr = [0.25, 0.75];
    // F^π and H^π element by element
    let fpi = DMatrix::from_fn(n, m * kk, |r, c| spec.common.f[(r, c)] * fr[c / m]);
    let hpi = DMatrix::from_fn(n, n * kk, |r, c| spec.common.h[(r, c)] * fr[c / n]);
    assert_eq!(sys.f_pi, fpi);
    assert_eq!(sys.h_pi, hpi);
    for i in [0, 2, 4] {
        let a = &sys.a[i];
        assert_eq!(a.shape(), (8, 8));
        let get = |r0: usize, c0: usize, rows: usize, cols: usize| a.view((r0, c0), (rows, cols)).into_owned();
        assert!((get(0, 0, 2, 2) - &fpi * &gains.ebar[i]).amax() < 1e-14);
        assert!((get(0, 2, 2, 2) - (&fpi * &gains.dbar[i] + &spec.common.h0)).amax() < 1e-14);
        assert!((get(0, 4, 2, 4) - (&fpi * &gains.cbar[i] + &hpi)).amax() < 1e-14);
        assert_eq!(get(2, 0, 2, 2), DMatrix::zeros(2, 2));
        assert_eq!(get(2, 2, 2, 2), spec.major.dynamics.a);
        assert_eq!(get(2, 4, 2, 4), DMatrix::zeros(2, 4));
        assert_eq!(get(4, 0, 4, 2), gains.lbar[i]);
        assert_eq!(get(4, 2, 4, 2), gains.gbar[i]);
        assert_eq!(get(4, 4, 4, 4), gains.abar[i]);
        for k in 0..kk {
            let t = &spec.minors[k];
            let ck = gains.cbar[i].rows(k * m, m).into_owned();
            let mut expect = &t.dynamics.b * ck;
            for r in 0..n {
                for c in 0..n {
                    expect[(r, k * n + c)] += t.dynamics.a[(r, c)];
                }
            }
            assert!((gains.abar[i].rows(k * n, n) - expect).amax() < 1e-14);
            assert!((gains.gbar[i].rows(k * n, n) - &t.dynamics.b * gains.dbar[i].rows(k * m, m)).amax() < 1e-14);
            assert!((gains.lbar[i].rows(k * n, n) - &t.dynamics.b * gains.ebar[i].rows(k * m, m)).amax() < 1e-14);
        }
    }
    let mut b = DMatrix::zeros(8, 2);
    b.view_mut((0, 0), (2, 2)).copy_from(&spec.common.f0);
    b.view_mut((2, 0), (2, 2)).copy_from(&spec.major.dynamics.b);
    assert_eq!(sys.b, b);
    let mut q = DMatrix::zeros(8, 8);
    q.view_mut((0, 0), (4, 4)).copy_from(&spec.major.cost.q);
    assert_eq!(sys.q, q);
    assert_eq!(sys.cross.view((0, 0), (4, 2)), spec.major.cost.cross);
    assert_eq!(sys.cross.view((4, 0), (4, 2)).amax(), 0.0);
    // forcing [f̂ + F^π r̄; b₀; B̄r̄ + b̄]
    let fhat = DVector::from_vec(vec![0.3, -0.4]);
    let rbar = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    let m0 = sys.forcing(1, &fhat, &rbar);
    let top = &fhat + &fpi * &rbar;
    assert!((m0.rows(0, 2) - top).amax() < 1e-14);
    assert_eq!(m0.rows(2, 2), DVector::from_vec(vec![0.1, -0.2]));
    let low0 = &spec.minors[0].dynamics.b * rbar.rows(0, 2);
    let low1 = &spec.minors[1].dynamics.b * rbar.rows(2, 2);
    assert!((m0.rows(4, 2) - low0).amax() < 1e-14);
    assert!((m0.rows(6, 2) - low1).amax() < 1e-14);
}

#[test]
fn extended_minor_embeds_the_major_closed_loop() {
    let spec = two_dim();
    let gains = random_gains(&spec, 4);
    let major = build_extended_major(&spec, &gains).unwrap();
    let pi0 = solve_backward_varying(&major.a, &major.b, &major.q, &major.cross, &major.r, &major.g, &spec.grid).unwrap();
    for k in 0..2 {
        let sys = build_extended_minor(&spec, k, &major, &pi0).unwrap();
        assert_eq!(sys.dim(), 10);
        for i in 0..spec.grid.len() {
            let a = &sys.a[i];
            assert_eq!(a.view((0, 0), (2, 2)), spec.minors[k].dynamics.a);
            assert_eq!(a.view((0, 2), (2, 8)).amax(), 0.0);
            assert_eq!(a.view((2, 0), (8, 2)).amax(), 0.0);
            let r_inv = major.r.clone().try_inverse().unwrap();
            let cl = &major.a[i] - &major.b * &r_inv * (major.cross.transpose() + major.b.transpose() * &pi0.values[i]);
            assert!((a.view((2, 2), (8, 8)) - cl).amax() < 1e-12);
        }
        assert_eq!(sys.b.view((0, 0), (2, 2)), spec.minors[k].dynamics.b);
        assert_eq!(sys.b.view((2, 0), (8, 2)).amax(), 0.0);
        assert_eq!(sys.q.view((0, 0), (4, 4)), spec.minors[k].cost.q);
        assert_eq!(sys.g.view((0, 0), (4, 4)), spec.minors[k].cost.g);
        assert_eq!(sys.q.view((4, 0), (6, 10)).amax(), 0.0);
    }
}
