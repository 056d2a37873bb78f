use nalgebra::DMatrix;
use serde::Serialize;

use super::{CostWeights, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::{psd_margin, right_pseudo_inverse, spd_inverse, sym_eigenvalues};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Minimum eigenvalue (or slack) backing the verdict, when one exists.
    pub margin: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn expect_shape(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected: format!("{rows}x{cols}"),
            found: shape(m),
        });
    }
    Ok(())
}

fn expect_len(what: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: len.to_string(),
        });
    }
    Ok(())
}

/// Every block size against `(n, m, r, K, M)`.
pub fn check_dimensions(spec: &ModelSpec) -> Result<()> {
    let (n, m, r) = (spec.dims.n, spec.dims.m, spec.dims.r);
    let k = spec.types();
    let mm = spec.chain.len();
    if k == 0 {
        return Err(Error::InvalidModel("at least one minor type is required".into()));
    }
    if mm == 0 {
        return Err(Error::InvalidModel("the latent chain needs at least one state".into()));
    }
    let agents = std::iter::once(("major".to_string(), &spec.major))
        .chain(spec.minors.iter().enumerate().map(|(i, a)| (format!("minor[{i}]"), a)));
    for (label, a) in agents {
        let d = &a.dynamics;
        expect_shape(&format!("{label}.a"), &d.a, n, n)?;
        expect_shape(&format!("{label}.b"), &d.b, n, m)?;
        expect_shape(&format!("{label}.sigma"), &d.sigma, n, r)?;
        expect_len(&format!("{label}.drift"), d.drift.dim(), n)?;
        if let super::TimeFunction::Sampled(vs) = &d.drift {
            expect_len(&format!("{label}.drift samples"), vs.len(), spec.grid.len())?;
        }
        let c = &a.cost;
        expect_shape(&format!("{label}.cost.g"), &c.g, 2 * n, 2 * n)?;
        expect_shape(&format!("{label}.cost.q"), &c.q, 2 * n, 2 * n)?;
        expect_shape(&format!("{label}.cost.cross"), &c.cross, 2 * n, m)?;
        expect_shape(&format!("{label}.cost.r"), &c.r, m, m)?;
        expect_len(&format!("{label}.initial.mean"), a.initial.mean.len(), n)?;
        expect_len(&format!("{label}.initial.std"), a.initial.std.len(), n)?;
    }
    for (j, s) in spec.chain.states.iter().enumerate() {
        expect_len(&format!("chain.states[{j}]"), s.len(), n)?;
    }
    expect_shape("chain.rates", &spec.chain.rates, mm, mm)?;
    expect_len("chain.initial", spec.chain.initial.len(), mm)?;
    let c = &spec.common;
    expect_shape("common.sigma", &c.sigma, n, r)?;
    expect_shape("common.f", &c.f, n, m * k)?;
    expect_shape("common.f0", &c.f0, n, m)?;
    expect_shape("common.h", &c.h, n, n * k)?;
    expect_shape("common.h0", &c.h0, n, n)?;
    expect_len("common.y0", c.y0.len(), n)?;
    match &c.drift {
        super::DriftFamily::Constant => {}
        super::DriftFamily::Affine { slopes } => {
            expect_len("common.drift.slopes", slopes.len(), mm)?;
            for s in slopes {
                expect_shape("common.drift.slopes", s, n, n)?;
            }
        }
        super::DriftFamily::Sampled { values } => {
            expect_len("common.drift.values", values.len(), mm)?;
            for v in values {
                expect_len("common.drift.values samples", v.len(), spec.grid.len())?;
                for x in v {
                    expect_len("common.drift.values", x.len(), n)?;
                }
            }
        }
    }
    expect_len("population.type_fractions", spec.population.type_fractions.len(), k)?;
    if let Some(w) = &spec.population.wiener_cov {
        expect_shape("population.wiener_cov", w, r, r)?;
    }
    Ok(())
}

fn symmetric_check(name: String, m: &DMatrix<f64>) -> AssumptionCheck {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    AssumptionCheck {
        passed: asym <= 1e-12 * scale,
        margin: Some(asym),
        detail: format!("max |M - Mᵀ| = {asym:.3e}"),
        name,
    }
}

fn psd_check(name: String, m: &DMatrix<f64>) -> AssumptionCheck {
    let (min, tol) = psd_margin(m);
    AssumptionCheck {
        passed: min >= -tol,
        margin: Some(min),
        detail: format!("minimum eigenvalue {min:.6e}"),
        name,
    }
}

fn cost_checks(label: &str, c: &CostWeights, delta: f64, out: &mut Vec<AssumptionCheck>) {
    out.push(symmetric_check(format!("{label}.G symmetric"), &c.g));
    out.push(symmetric_check(format!("{label}.Q symmetric"), &c.q));
    out.push(symmetric_check(format!("{label}.R symmetric"), &c.r));
    out.push(psd_check(format!("{label}.G >= 0"), &c.g));
    let r_min = sym_eigenvalues(&c.r).first().copied().unwrap_or(f64::NAN);
    out.push(AssumptionCheck {
        name: format!("{label}.R > delta I"),
        passed: r_min > delta,
        margin: Some(r_min - delta),
        detail: format!("minimum eigenvalue {r_min:.6e} vs delta {delta:.3e}"),
    });
    match spd_inverse(&c.r) {
        Some(r_inv) => {
            let schur = &c.q - &c.cross * r_inv * c.cross.transpose();
            out.push(psd_check(format!("{label}.Q - N R^-1 N^T >= 0"), &schur));
        }
        None => out.push(AssumptionCheck {
            name: format!("{label}.Q - N R^-1 N^T >= 0"),
            passed: false,
            margin: None,
            detail: "R is not positive definite".into(),
        }),
    }
}

/// Evaluate every checkable assumption without failing early. Shapes must
/// already be consistent; call [`check_dimensions`] first or use [`validate`].
pub fn assess(spec: &ModelSpec) -> ValidationReport {
    let mut checks = Vec::new();
    cost_checks("major", &spec.major.cost, spec.delta, &mut checks);
    for (k, t) in spec.minors.iter().enumerate() {
        cost_checks(&format!("minor[{k}]"), &t.cost, spec.delta, &mut checks);
    }

    let ch = &spec.chain;
    let mut worst_rate = 0.0_f64;
    let mut diag = 0.0_f64;
    for i in 0..ch.len() {
        for j in 0..ch.len() {
            let v = ch.rates[(i, j)];
            if i == j {
                diag = diag.max(v.abs());
            } else {
                worst_rate = worst_rate.min(v);
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "chain.rates".into(),
        passed: worst_rate >= 0.0 && diag == 0.0 && ch.rates.iter().all(|x| x.is_finite()),
        margin: Some(worst_rate),
        detail: format!("most negative off-diagonal rate {worst_rate:.3e}, max |diagonal| {diag:.3e}"),
    });
    checks.push(simplex_check("chain.initial", ch.initial.as_slice(), 1e-12));
    checks.push(simplex_check("population.type_fractions", spec.population.type_fractions.as_slice(), 1e-12));

    let min_n = spec.population.n_schedule.iter().copied().min();
    checks.push(AssumptionCheck {
        name: "population.n_schedule".into(),
        passed: !spec.population.n_schedule.is_empty() && min_n.unwrap_or(0) >= 1,
        margin: min_n.map(|x| x as f64),
        detail: format!("schedule {:?}", spec.population.n_schedule),
    });
    if let Some(w) = &spec.population.wiener_cov {
        let (min, _) = psd_margin(w);
        checks.push(AssumptionCheck {
            name: "population.wiener_cov > 0".into(),
            passed: min > 0.0 && (w - w.transpose()).abs().max() <= 1e-12 * w.abs().max().max(1.0),
            margin: Some(min),
            detail: format!("minimum eigenvalue {min:.6e}"),
        });
    }

    if spec.filtering_enabled() {
        let ok = right_pseudo_inverse(&spec.common.sigma).is_some();
        checks.push(AssumptionCheck {
            name: "common.sigma full row rank".into(),
            passed: ok,
            margin: sym_eigenvalues(&(&spec.common.sigma * spec.common.sigma.transpose())).first().copied(),
            detail: "σσᵀ must be invertible to filter the latent chain".into(),
        });
    }

    checks.push(AssumptionCheck {
        name: "delta > 0".into(),
        passed: spec.delta > 0.0,
        margin: Some(spec.delta),
        detail: format!("delta = {:.3e}", spec.delta),
    });
    ValidationReport { checks }
}

fn simplex_check(name: &str, v: &[f64], tol: f64) -> AssumptionCheck {
    let sum: f64 = v.iter().sum();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    AssumptionCheck {
        name: name.into(),
        passed: (sum - 1.0).abs() <= tol && min >= 0.0,
        margin: Some((sum - 1.0).abs()),
        detail: format!("sum {sum:.15}, min component {min:.3e}"),
    }
}

/// Full validation: shapes first, then every assumption. The first failure
/// is turned into an error; on success the complete report is returned.
pub fn validate(spec: &ModelSpec) -> Result<ValidationReport> {
    check_dimensions(spec)?;
    let report = assess(spec);
    if let Some(bad) = report.failures().next() {
        let err = if bad.name.contains(">= 0") || bad.name.contains("> delta") {
            Error::ConvexityViolation { check: bad.name.clone(), eigenvalue: bad.margin.unwrap_or(f64::NAN) }
        } else if bad.name == "common.sigma full row rank" {
            Error::SingularSigma
        } else {
            Error::InvalidModel(format!("{}: {}", bad.name, bad.detail))
        };
        return Err(err);
    }
    Ok(report)
}
