//! Backward matrix Riccati ODEs
//!
//! `−Π̇ = ΠA + AᵀΠ − (BᵀΠ + Nᵀ)ᵀR⁻¹(BᵀΠ + Nᵀ) + Q`, `Π(T) = G`,
//!
//! integrated with classic fixed-step RK4 on the shared grid. `A` may vary in
//! time (sampled on the grid, linearly interpolated at RK4 half steps).

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{max_abs, spd_inverse, symmetrize};

const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// `Π(tᵢ)` for `i = 0..=steps`.
    pub values: Vec<DMatrix<f64>>,
    pub terminal: DMatrix<f64>,
}

impl RiccatiSolution {
    pub fn at(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn dim(&self) -> usize {
        self.terminal.nrows()
    }

    /// `t, Π[0,0], Π[0,1], …` in row-major order, one line per grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.dim();
        let mut header = String::from("t");
        for i in 0..d {
            for j in 0..d {
                header.push_str(&format!(",p_{i}_{j}"));
            }
        }
        writeln!(w, "{header}")?;
        for (k, p) in self.values.iter().enumerate() {
            let mut line = format!("{}", self.grid.time(k));
            for i in 0..d {
                for j in 0..d {
                    line.push_str(&format!(",{}", p[(i, j)]));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Drift matrix, either constant or sampled on the grid.
#[derive(Debug, Clone, Copy)]
pub enum Coefficient<'a> {
    Constant(&'a DMatrix<f64>),
    Sampled(&'a [DMatrix<f64>]),
}

impl<'a> Coefficient<'a> {
    fn at(&self, i: usize) -> DMatrix<f64> {
        match self {
            Coefficient::Constant(a) => (*a).clone(),
            Coefficient::Sampled(v) => v[i].clone(),
        }
    }

    fn midpoint(&self, i: usize) -> DMatrix<f64> {
        match self {
            Coefficient::Constant(a) => (*a).clone(),
            Coefficient::Sampled(v) => (&v[i] + &v[i + 1]) * 0.5,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Coefficient::Constant(a) => a.shape(),
            Coefficient::Sampled(v) => v.first().map_or((0, 0), |a| a.shape()),
        }
    }
}

/// Coefficients of one Riccati problem.
#[derive(Debug, Clone, Copy)]
pub struct RiccatiProblem<'a> {
    pub a: Coefficient<'a>,
    pub b: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub cross: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub g: &'a DMatrix<f64>,
}

struct Rhs<'a> {
    b: &'a DMatrix<f64>,
    q: &'a DMatrix<f64>,
    cross_t: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl Rhs<'_> {
    /// `ΠA + AᵀΠ − (BᵀΠ + Nᵀ)ᵀR⁻¹(BᵀΠ + Nᵀ) + Q`, i.e. `−Π̇`.
    fn eval(&self, p: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.b.transpose() * p + &self.cross_t;
        let pa = p * a;
        &pa + pa.transpose() - k.transpose() * &self.r_inv * &k + self.q
    }
}

fn check(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch {
            what: format!("riccati {what}"),
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

pub fn solve_problem(p: &RiccatiProblem<'_>, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let (d, dc) = p.a.dims();
    if d != dc {
        return Err(Error::DimensionMismatch {
            what: "riccati A".into(),
            expected: format!("{d}x{d}"),
            found: format!("{d}x{dc}"),
        });
    }
    let m = p.b.ncols();
    check("B", p.b, d, m)?;
    check("Q", p.q, d, d)?;
    check("N", p.cross, d, m)?;
    check("R", p.r, m, m)?;
    check("G", p.g, d, d)?;
    if let Coefficient::Sampled(v) = p.a {
        if v.len() != grid.len() {
            return Err(Error::GridMismatch(format!("A has {} samples, grid has {}", v.len(), grid.len())));
        }
    }
    let r_inv = spd_inverse(p.r).ok_or_else(|| Error::ConvexityViolation {
        check: "R > 0".into(),
        eigenvalue: crate::linalg::sym_eigenvalues(p.r).first().copied().unwrap_or(f64::NAN),
    })?;
    let rhs = Rhs { b: p.b, q: p.q, cross_t: p.cross.transpose(), r_inv };

    let dt = grid.dt();
    let mut values = vec![DMatrix::zeros(d, d); grid.len()];
    let mut pi = p.g.clone();
    symmetrize(&mut pi);
    values[grid.steps] = pi.clone();
    for i in (0..grid.steps).rev() {
        let a_hi = p.a.at(i + 1);
        let a_mid = p.a.midpoint(i);
        let a_lo = p.a.at(i);
        let k1 = rhs.eval(&pi, &a_hi);
        let k2 = rhs.eval(&(&pi + &k1 * (0.5 * dt)), &a_mid);
        let k3 = rhs.eval(&(&pi + &k2 * (0.5 * dt)), &a_mid);
        let k4 = rhs.eval(&(&pi + &k3 * dt), &a_lo);
        pi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        symmetrize(&mut pi);
        if !max_abs(&pi).is_finite() || max_abs(&pi) > BLOW_UP {
            return Err(Error::BlowUp { t: grid.time(i) });
        }
        values[i] = pi.clone();
    }
    Ok(RiccatiSolution { grid: *grid, values, terminal: p.g.clone() })
}

/// Constant-coefficient solve.
pub fn solve_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    r: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    solve_problem(&RiccatiProblem { a: Coefficient::Constant(a), b, q, cross, r, g }, grid)
}

/// Solve with `A(tᵢ)` sampled on the grid.
pub fn solve_backward_varying(
    a: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    r: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    solve_problem(&RiccatiProblem { a: Coefficient::Sampled(a), b, q, cross, r, g }, grid)
}
