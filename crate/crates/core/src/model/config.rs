//! TOML model files. Every table rejects unknown keys; matrices are written
//! as arrays of rows and checked against the declared dimensions on load.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use super::{
    AgentDynamics, AgentSpec, CommonProcessSpec, CostWeights, Dims, DriftFamily, GaussianInit,
    LatentChainSpec, ModelSpec, PopulationSpec, TimeFunction,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    dims: DimsFile,
    grid: TimeGrid,
    major: AgentFile,
    minor: Vec<AgentFile>,
    chain: ChainFile,
    common: CommonFile,
    population: PopulationFile,
    #[serde(default)]
    validation: ValidationFile,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsFile {
    n: usize,
    m: usize,
    r: usize,
    types: usize,
    chain_states: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    a: Rows,
    b: Rows,
    sigma: Rows,
    #[serde(default)]
    drift: Option<TimeFunctionFile>,
    #[serde(default)]
    initial: Option<InitFile>,
    cost: CostFile,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TimeFunctionFile {
    Constant { value: Vec<f64> },
    Sampled { values: Rows },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitFile {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    g: Rows,
    q: Rows,
    #[serde(default)]
    cross: Option<Rows>,
    r: Rows,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    states: Rows,
    rates: Rows,
    initial: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommonFile {
    sigma: Rows,
    f: Rows,
    f0: Rows,
    h: Rows,
    h0: Rows,
    #[serde(default)]
    y0: Option<Vec<f64>>,
    #[serde(default)]
    drift: Option<DriftFile>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DriftFile {
    Constant,
    Affine { slopes: Vec<Rows> },
    Sampled { values: Vec<Rows> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationFile {
    type_fractions: Vec<f64>,
    n_schedule: Vec<usize>,
    #[serde(default)]
    wiener_cov: Option<Rows>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidationFile {
    #[serde(default = "default_delta")]
    delta: f64,
}

impl Default for ValidationFile {
    fn default() -> Self {
        Self { delta: default_delta() }
    }
}

fn default_delta() -> f64 {
    1e-8
}

fn mismatch(what: &str, expected: String, found: String) -> Error {
    Error::DimensionMismatch { what: what.to_string(), expected, found }
}

fn matrix(what: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    let found_cols = rows.first().map_or(0, |r| r.len());
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(mismatch(
            what,
            format!("{nrows}x{ncols}"),
            format!("{}x{}", rows.len(), found_cols),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(what: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(mismatch(what, len.to_string(), v.len().to_string()));
    }
    Ok(DVector::from_column_slice(v))
}

fn time_function(what: &str, f: &Option<TimeFunctionFile>, n: usize, grid: &TimeGrid) -> Result<TimeFunction> {
    match f {
        None => Ok(TimeFunction::zeros(n)),
        Some(TimeFunctionFile::Constant { value }) => Ok(TimeFunction::Constant(vector(what, value, n)?)),
        Some(TimeFunctionFile::Sampled { values }) => {
            if values.len() != grid.len() {
                return Err(mismatch(what, format!("{} samples", grid.len()), format!("{} samples", values.len())));
            }
            values
                .iter()
                .map(|v| vector(what, v, n))
                .collect::<Result<Vec<_>>>()
                .map(TimeFunction::Sampled)
        }
    }
}

fn agent(label: &str, f: &AgentFile, dims: Dims, grid: &TimeGrid) -> Result<AgentSpec> {
    let Dims { n, m, r } = dims;
    let p = |s: &str| format!("{label}.{s}");
    let dynamics = AgentDynamics {
        a: matrix(&p("a"), &f.a, n, n)?,
        b: matrix(&p("b"), &f.b, n, m)?,
        drift: time_function(&p("drift"), &f.drift, n, grid)?,
        sigma: matrix(&p("sigma"), &f.sigma, n, r)?,
    };
    let cost = CostWeights {
        g: matrix(&p("cost.g"), &f.cost.g, 2 * n, 2 * n)?,
        q: matrix(&p("cost.q"), &f.cost.q, 2 * n, 2 * n)?,
        cross: match &f.cost.cross {
            Some(c) => matrix(&p("cost.cross"), c, 2 * n, m)?,
            None => DMatrix::zeros(2 * n, m),
        },
        r: matrix(&p("cost.r"), &f.cost.r, m, m)?,
    };
    let initial = match &f.initial {
        Some(i) => GaussianInit {
            mean: vector(&p("initial.mean"), &i.mean, n)?,
            std: vector(&p("initial.std"), &i.std, n)?,
        },
        None => GaussianInit::zero(n),
    };
    Ok(AgentSpec { dynamics, cost, initial })
}

fn build(file: ModelFile) -> Result<ModelSpec> {
    let d = &file.dims;
    if d.n == 0 || d.m == 0 || d.r == 0 || d.types == 0 || d.chain_states == 0 {
        return Err(Error::Config("all declared dimensions must be positive".into()));
    }
    let dims = Dims { n: d.n, m: d.m, r: d.r };
    let grid = TimeGrid::new(file.grid.horizon, file.grid.steps)?;
    let (n, m, k, mm) = (d.n, d.m, d.types, d.chain_states);

    if file.minor.len() != k {
        return Err(mismatch("minor", format!("{k} types"), format!("{} types", file.minor.len())));
    }
    let major = agent("major", &file.major, dims, &grid)?;
    let minors = file
        .minor
        .iter()
        .enumerate()
        .map(|(i, f)| agent(&format!("minor[{i}]"), f, dims, &grid))
        .collect::<Result<Vec<_>>>()?;

    if file.chain.states.len() != mm {
        return Err(mismatch("chain.states", format!("{mm} states"), format!("{} states", file.chain.states.len())));
    }
    let chain = LatentChainSpec {
        states: file
            .chain
            .states
            .iter()
            .map(|s| vector("chain.states", s, n))
            .collect::<Result<Vec<_>>>()?,
        rates: matrix("chain.rates", &file.chain.rates, mm, mm)?,
        initial: vector("chain.initial", &file.chain.initial, mm)?,
    };

    let c = &file.common;
    let drift = match &c.drift {
        None | Some(DriftFile::Constant) => DriftFamily::Constant,
        Some(DriftFile::Affine { slopes }) => {
            if slopes.len() != mm {
                return Err(mismatch("common.drift.slopes", format!("{mm}"), format!("{}", slopes.len())));
            }
            DriftFamily::Affine {
                slopes: slopes
                    .iter()
                    .map(|s| matrix("common.drift.slopes", s, n, n))
                    .collect::<Result<Vec<_>>>()?,
            }
        }
        Some(DriftFile::Sampled { values }) => {
            if values.len() != mm {
                return Err(mismatch("common.drift.values", format!("{mm} states"), format!("{}", values.len())));
            }
            let mut per_state = Vec::with_capacity(mm);
            for rows in values {
                if rows.len() != grid.len() {
                    return Err(mismatch(
                        "common.drift.values",
                        format!("{} samples", grid.len()),
                        format!("{} samples", rows.len()),
                    ));
                }
                per_state.push(
                    rows.iter()
                        .map(|v| vector("common.drift.values", v, n))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            DriftFamily::Sampled { values: per_state }
        }
    };
    let common = CommonProcessSpec {
        drift,
        sigma: matrix("common.sigma", &c.sigma, n, d.r)?,
        f: matrix("common.f", &c.f, n, m * k)?,
        f0: matrix("common.f0", &c.f0, n, m)?,
        h: matrix("common.h", &c.h, n, n * k)?,
        h0: matrix("common.h0", &c.h0, n, n)?,
        y0: match &c.y0 {
            Some(v) => vector("common.y0", v, n)?,
            None => DVector::zeros(n),
        },
    };

    let p = &file.population;
    let population = PopulationSpec {
        type_fractions: vector("population.type_fractions", &p.type_fractions, k)?,
        n_schedule: p.n_schedule.clone(),
        wiener_cov: match &p.wiener_cov {
            Some(w) => Some(matrix("population.wiener_cov", w, d.r, d.r)?),
            None => None,
        },
    };

    Ok(ModelSpec {
        dims,
        grid,
        major,
        minors,
        chain,
        common,
        population,
        delta: file.validation.delta,
    })
}

pub(crate) fn parse_model(text: &str) -> Result<ModelSpec> {
    let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    build(file)
}

/// Load a model file; shapes are checked but assumptions are not (see [`super::validate`]).
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(crate::io::with_path(path))?;
    parse_model(&text)
}
