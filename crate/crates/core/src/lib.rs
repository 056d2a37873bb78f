//! Solver and simulation laboratory for major-minor linear-quadratic-Gaussian
//! mean field games whose agents share an observed common process driven by a
//! latent continuous-time Markov chain and a latent Wiener process.
//!
//! The pipeline is:
//!
//! 1. [`model`]: load and validate a [`ModelSpec`], assemble extended systems.
//! 2. [`meanfield`]: damped fixed point on the consistency equations, producing
//!    the mean-field gains and the major/minor Riccati trajectories.
//! 3. [`offset`]: regression Monte Carlo for the coupled linear offset BSDEs,
//!    with the latent chain tracked by the [`wonham`] filter.
//! 4. [`sim`]: finite-population and infinite-population simulation, realized costs.
//! 5. [`nash`]: empirical epsilon-Nash gap by unilateral deviation search.

pub mod error;
pub mod grid;
pub mod latent;
pub mod io;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod nash;
pub mod offset;
mod parallel;
pub mod riccati;
pub mod rng;
pub mod sim;
pub mod wonham;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use meanfield::{check_hurwitz, solve_consistency, ConsistencyOptions, HurwitzReport, MeanFieldGains};
pub use model::{validate, ModelSpec, ValidationReport};
pub use nash::{estimate_gap, gap_curve, AgentRole, DeviationPolicy, GapEstimate, GapOptions};
pub use offset::{solve_joint_offsets, OffsetEstimator, OffsetOptions};
pub use riccati::{solve_backward, RiccatiSolution};
pub use sim::{simulate_finite, simulate_meanfield, CostReport, SimOptions};
pub use wonham::{FilterState, WonhamFilter};
