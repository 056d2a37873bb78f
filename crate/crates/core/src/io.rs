//! Result files: gains JSON, offset estimator JSON and plot-ready CSV tables.
//!
//! Matrices are stored row-major as nested arrays. Floats are written with
//! Rust's shortest round-trip formatting, so re-reading is exact and identical
//! inputs give byte-identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{GainTrajectory, MeanFieldGains};
use crate::model::ModelSpec;
use crate::nash::GapEstimate;
use crate::offset::OffsetEstimator;
use crate::sim::{CostReport, MomentReport, SimPath};
use crate::wonham::FilterPath;

pub const GAINS_VERSION: u32 = 1;

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("ragged matrix in {what}")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// On-disk form of converged mean-field gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub version: u32,
    pub n: usize,
    pub m: usize,
    pub types: usize,
    pub horizon: f64,
    pub steps: usize,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub cbar: Vec<Vec<Vec<f64>>>,
    pub dbar: Vec<Vec<Vec<f64>>>,
    pub ebar: Vec<Vec<Vec<f64>>>,
}

impl GainsFile {
    pub fn from_gains(spec: &ModelSpec, mf: &MeanFieldGains) -> Self {
        let g = &mf.gains;
        Self {
            version: GAINS_VERSION,
            n: spec.dims.n,
            m: spec.dims.m,
            types: spec.types(),
            horizon: spec.grid.horizon,
            steps: spec.grid.steps,
            iterations: mf.iterations,
            residual: mf.residual,
            residual_history: mf.residual_history.clone(),
            cbar: g.cbar.iter().map(to_rows).collect(),
            dbar: g.dbar.iter().map(to_rows).collect(),
            ebar: g.ebar.iter().map(to_rows).collect(),
        }
    }

    /// Rebuilds the gains and re-solves the Riccati equations they imply.
    pub fn into_gains(self, spec: &ModelSpec) -> Result<MeanFieldGains> {
        if self.version != GAINS_VERSION {
            return Err(Error::Config(format!("gains file version {} is not supported", self.version)));
        }
        if self.n != spec.dims.n || self.m != spec.dims.m || self.types != spec.types() {
            return Err(Error::DimensionMismatch {
                what: "gains file".into(),
                expected: format!("n={} m={} K={}", spec.dims.n, spec.dims.m, spec.types()),
                found: format!("n={} m={} K={}", self.n, self.m, self.types),
            });
        }
        if self.steps != spec.grid.steps || self.horizon != spec.grid.horizon {
            return Err(Error::GridMismatch(format!(
                "gains file grid (T={}, {} steps) differs from the model (T={}, {} steps)",
                self.horizon, self.steps, spec.grid.horizon, spec.grid.steps
            )));
        }
        let conv = |v: &[Vec<Vec<f64>>], what: &str| v.iter().map(|m| from_rows(m, what)).collect::<Result<Vec<_>>>();
        let gains = GainTrajectory::from_cde(spec, conv(&self.cbar, "cbar")?, conv(&self.dbar, "dbar")?, conv(&self.ebar, "ebar")?);
        gains.check_shapes(self.n, self.m, self.types)?;
        if gains.len() != spec.grid.len() {
            return Err(Error::GridMismatch(format!("gains file has {} points, grid has {}", gains.len(), spec.grid.len())));
        }
        let mut mf = MeanFieldGains::assemble(spec, gains)?;
        mf.iterations = self.iterations;
        mf.residual = self.residual;
        mf.residual_history = self.residual_history;
        Ok(mf)
    }
}

/// Attaches the path to an I/O error.
pub fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(with_path(path))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(with_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_gains(path: &Path, spec: &ModelSpec, mf: &MeanFieldGains) -> Result<()> {
    write_json(path, &GainsFile::from_gains(spec, mf))
}

pub fn load_gains(path: &Path, spec: &ModelSpec) -> Result<MeanFieldGains> {
    read_json::<GainsFile>(path)?.into_gains(spec)
}

pub fn save_offsets(path: &Path, est: &OffsetEstimator) -> Result<()> {
    write_json(path, est)
}

pub fn load_offsets(path: &Path, spec: &ModelSpec) -> Result<OffsetEstimator> {
    let est: OffsetEstimator = read_json(path)?;
    est.check_compatible(spec)?;
    Ok(est)
}

fn opt_type(t: Option<usize>) -> String {
    t.map_or_else(|| "major".to_string(), |k| k.to_string())
}

/// `path,agent,type,cost,terminal,state,cross,control`.
pub fn write_cost_table<W: Write>(mut w: W, report: &CostReport) -> Result<()> {
    writeln!(w, "path,agent,type,cost,terminal,state,cross,control")?;
    for r in &report.records {
        let p = &r.parts;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.path,
            r.agent,
            opt_type(r.ty),
            r.total,
            p.terminal,
            p.state,
            p.cross,
            p.control
        )?;
    }
    Ok(())
}

/// One row per (population, class): `population,class,count,mean,stderr,terminal,state,cross,control`.
/// The mean-field system is labelled `inf`.
pub fn write_cost_summary<W: Write>(mut w: W, reports: &[CostReport]) -> Result<()> {
    writeln!(w, "population,class,count,mean,stderr,terminal,state,cross,control")?;
    for rep in reports {
        let pop = rep.population.map_or_else(|| "inf".to_string(), |n| n.to_string());
        for s in std::iter::once(&rep.major).chain(&rep.minor_by_type).chain(std::iter::once(&rep.minor_all)) {
            let p = &s.parts;
            writeln!(
                w,
                "{pop},{},{},{},{},{},{},{},{}",
                s.label, s.count, s.mean, s.stderr, p.terminal, p.state, p.cross, p.control
            )?;
        }
    }
    Ok(())
}

pub fn write_moments<W: Write>(mut w: W, reports: &[MomentReport]) -> Result<()> {
    writeln!(w, "population,quantity,sup,stderr")?;
    for rep in reports {
        let pop = rep.population.map_or_else(|| "inf".to_string(), |n| n.to_string());
        for (name, b) in [
            ("minor_state", rep.minor_state),
            ("empirical_mean", rep.empirical_mean),
            ("mean_field", rep.mean_field),
            ("common", rep.common),
            ("major_state", rep.major_state),
        ] {
            writeln!(w, "{pop},{name},{},{}", b.sup, b.stderr)?;
        }
    }
    Ok(())
}

/// `N,role,baseline,best,gap,stderr,evals`, plus diagnostics.
pub fn write_gap_curve<W: Write>(mut w: W, curve: &[GapEstimate]) -> Result<()> {
    writeln!(w, "N,role,baseline,best,gap,stderr,evals,raw_gap,training_gain,budget_exhausted")?;
    for g in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            g.n, g.role, g.baseline, g.best, g.gap, g.stderr, g.evals, g.raw_gap, g.training_gain, g.budget_exhausted
        )?;
    }
    Ok(())
}

/// `t,y_latent,chain,pi_0..,fhat_0..` for one filtered path.
pub fn write_filter<W: Write>(mut w: W, spec: &ModelSpec, yl: &[f64], chain: &[usize], filt: &FilterPath) -> Result<()> {
    let n = spec.dims.n;
    let mut header = String::from("t");
    (0..n).for_each(|c| header.push_str(&format!(",y_latent_{c}")));
    header.push_str(",chain");
    (0..filt.states).for_each(|j| header.push_str(&format!(",pi_{j}")));
    (0..n).for_each(|c| header.push_str(&format!(",fhat_{c}")));
    writeln!(w, "{header}")?;
    for i in 0..spec.grid.len() {
        let mut line = format!("{}", spec.grid.time(i));
        yl[i * n..(i + 1) * n].iter().for_each(|v| line.push_str(&format!(",{v}")));
        line.push_str(&format!(",{}", chain[i]));
        filt.pi_at(i).iter().for_each(|v| line.push_str(&format!(",{v}")));
        filt.fhat_at(i).iter().for_each(|v| line.push_str(&format!(",{v}")));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Long format: `path,step,t,agent,component,state,control`, where agent `major` is the
/// major agent; followed by rows for `y`, `x_avg` and `xbar_k` with an empty control.
pub fn write_trajectories<W: Write>(mut w: W, spec: &ModelSpec, paths: &[SimPath]) -> Result<()> {
    let (n, m) = (spec.dims.n, spec.dims.m);
    let kk = spec.types();
    writeln!(w, "path,step,t,agent,component,state,control")?;
    for p in paths {
        for i in 0..spec.grid.len() {
            let t = spec.grid.time(i);
            for c in 0..n {
                let u = if c < m { format!("{}", p.u0[i * m + c]) } else { String::new() };
                writeln!(w, "{},{i},{t},major,{c},{},{u}", p.path, p.x0[i * n + c])?;
            }
            for a in 0..p.agents {
                for c in 0..n {
                    let base = i * p.agents + a;
                    let u = if c < m { format!("{}", p.u[base * m + c]) } else { String::new() };
                    writeln!(w, "{},{i},{t},{a},{c},{},{u}", p.path, p.x[base * n + c])?;
                }
            }
            for c in 0..n {
                writeln!(w, "{},{i},{t},y,{c},{},", p.path, p.y[i * n + c])?;
                writeln!(w, "{},{i},{t},x_avg,{c},{},", p.path, p.x_avg[i * n + c])?;
            }
            for k in 0..kk {
                for c in 0..n {
                    writeln!(w, "{},{i},{t},xbar_{k},{c},{},", p.path, p.xbar[(i * kk + k) * n + c])?;
                }
            }
        }
    }
    Ok(())
}

/// Writes `contents` through a closure into `path`.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
