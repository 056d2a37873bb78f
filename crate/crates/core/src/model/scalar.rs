//! Programmatic construction of scalar (`n = m = r = 1`) models.

use nalgebra::{DMatrix, DVector};

use super::{
    check_dimensions, AgentDynamics, AgentSpec, CommonProcessSpec, CostWeights, Dims, DriftFamily, GaussianInit,
    LatentChainSpec, ModelSpec, PopulationSpec, TimeFunction,
};
use crate::error::Result;
use crate::grid::TimeGrid;

/// One scalar agent. Cost weights act on `[own state; y]` for minors and on
/// `[y; x⁰]` for the major agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarAgent {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub drift: f64,
    pub q: [[f64; 2]; 2],
    pub g: [[f64; 2]; 2],
    pub cross: [f64; 2],
    pub r: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for ScalarAgent {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            sigma: 0.0,
            drift: 0.0,
            q: [[1.0, 0.0], [0.0, 0.0]],
            g: [[0.0; 2]; 2],
            cross: [0.0; 2],
            r: 1.0,
            init_mean: 0.0,
            init_std: 0.0,
        }
    }
}

/// Scalar model with `K = minors.len()` types and `M = chain_states.len()`
/// chain states.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarParams {
    pub horizon: f64,
    pub steps: usize,
    pub major: ScalarAgent,
    pub minors: Vec<ScalarAgent>,
    pub type_fractions: Vec<f64>,
    pub chain_states: Vec<f64>,
    /// Off-diagonal jump intensities, row-major `M × M`.
    pub rates: Vec<Vec<f64>>,
    pub chain_initial: Vec<f64>,
    /// `f = γⱼ + slopeⱼ·yᴸ` when present, `f = γⱼ` otherwise.
    pub slopes: Option<Vec<f64>>,
    pub common_sigma: f64,
    /// Per-type control impact on `y`.
    pub f: Vec<f64>,
    pub f0: f64,
    /// Per-type state impact on `y`.
    pub h: Vec<f64>,
    pub h0: f64,
    pub y0: f64,
    pub n_schedule: Vec<usize>,
    pub delta: f64,
}

impl Default for ScalarParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 100,
            major: ScalarAgent::default(),
            minors: vec![ScalarAgent::default()],
            type_fractions: vec![1.0],
            chain_states: vec![0.0],
            rates: vec![vec![0.0]],
            chain_initial: vec![1.0],
            slopes: None,
            common_sigma: 1.0,
            f: vec![0.0],
            f0: 0.0,
            h: vec![0.0],
            h0: 0.0,
            y0: 0.0,
            n_schedule: vec![1],
            delta: 1e-8,
        }
    }
}

fn m2(x: [[f64; 2]; 2]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[x[0][0], x[0][1], x[1][0], x[1][1]])
}

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn agent(p: &ScalarAgent) -> AgentSpec {
    AgentSpec {
        dynamics: AgentDynamics {
            a: s(p.a),
            b: s(p.b),
            drift: TimeFunction::Constant(DVector::from_element(1, p.drift)),
            sigma: s(p.sigma),
        },
        cost: CostWeights {
            g: m2(p.g),
            q: m2(p.q),
            cross: DMatrix::from_column_slice(2, 1, &p.cross),
            r: s(p.r),
        },
        initial: GaussianInit {
            mean: DVector::from_element(1, p.init_mean),
            std: DVector::from_element(1, p.init_std),
        },
    }
}

impl ScalarParams {
    pub fn build(&self) -> Result<ModelSpec> {
        let mm = self.chain_states.len();
        let k = self.minors.len();
        let spec = ModelSpec {
            dims: Dims { n: 1, m: 1, r: 1 },
            grid: TimeGrid::new(self.horizon, self.steps)?,
            major: agent(&self.major),
            minors: self.minors.iter().map(agent).collect(),
            chain: LatentChainSpec {
                states: self.chain_states.iter().map(|&g| DVector::from_element(1, g)).collect(),
                rates: DMatrix::from_fn(mm, mm, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        self.rates.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
                    }
                }),
                initial: DVector::from_column_slice(&self.chain_initial),
            },
            common: CommonProcessSpec {
                drift: match &self.slopes {
                    Some(sl) => DriftFamily::Affine { slopes: sl.iter().map(|&x| s(x)).collect() },
                    None => DriftFamily::Constant,
                },
                sigma: s(self.common_sigma),
                f: DMatrix::from_row_slice(1, self.f.len(), &self.f),
                f0: s(self.f0),
                h: DMatrix::from_row_slice(1, self.h.len(), &self.h),
                h0: s(self.h0),
                y0: DVector::from_element(1, self.y0),
            },
            population: PopulationSpec {
                type_fractions: DVector::from_column_slice(&self.type_fractions),
                n_schedule: self.n_schedule.clone(),
                wiener_cov: None,
            },
            delta: self.delta,
        };
        if spec.chain.initial.len() != mm || spec.population.type_fractions.len() != k {
            return Err(crate::Error::DimensionMismatch {
                what: "scalar model".into(),
                expected: format!("{mm} chain weights and {k} type fractions"),
                found: format!(
                    "{} chain weights and {} type fractions",
                    spec.chain.initial.len(),
                    spec.population.type_fractions.len()
                ),
            });
        }
        check_dimensions(&spec)?;
        Ok(spec)
    }

    /// One minor type, no coupling through `y`, no latent chain.
    pub fn decoupled() -> Self {
        Self {
            major: ScalarAgent { a: -0.5, sigma: 0.3, q: [[0.0, 0.0], [0.0, 1.0]], g: [[0.0, 0.0], [0.0, 0.5]], init_std: 0.5, ..Default::default() },
            minors: vec![ScalarAgent { a: 0.3, sigma: 0.3, q: [[1.0, 0.0], [0.0, 0.0]], g: [[0.5, 0.0], [0.0, 0.0]], init_mean: 0.5, init_std: 0.5, ..Default::default() }],
            common_sigma: 0.5,
            n_schedule: vec![2, 5, 10, 20, 50],
            ..Default::default()
        }
    }

    /// Two minor types coupled through `y`, which is driven by a two-state chain.
    pub fn coupled_reference() -> Self {
        Self {
            major: ScalarAgent {
                a: 0.2,
                b: 1.0,
                sigma: 0.3,
                drift: 0.1,
                q: [[0.5, -0.5], [-0.5, 1.0]],
                g: [[0.25, -0.25], [-0.25, 0.5]],
                r: 1.0,
                init_mean: 0.2,
                init_std: 0.3,
                ..Default::default()
            },
            minors: vec![
                ScalarAgent {
                    a: 0.3,
                    b: 1.0,
                    sigma: 0.3,
                    drift: 0.1,
                    q: [[1.0, -0.8], [-0.8, 1.0]],
                    g: [[0.5, 0.0], [0.0, 0.0]],
                    r: 1.0,
                    init_mean: 0.5,
                    init_std: 0.4,
                    ..Default::default()
                },
                ScalarAgent {
                    a: -0.2,
                    b: 0.8,
                    sigma: 0.4,
                    drift: -0.1,
                    q: [[1.5, 0.3], [0.3, 1.0]],
                    g: [[0.5, 0.1], [0.1, 0.05]],
                    r: 0.5,
                    init_mean: -0.3,
                    init_std: 0.4,
                    ..Default::default()
                },
            ],
            type_fractions: vec![0.6, 0.4],
            chain_states: vec![-1.0, 1.0],
            rates: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            chain_initial: vec![0.5, 0.5],
            common_sigma: 0.5,
            f: vec![2.0, 1.5],
            f0: 0.5,
            h: vec![0.3, 0.2],
            h0: 0.2,
            n_schedule: vec![2, 5, 10, 20, 50],
            ..Default::default()
        }
    }
}
