use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("convexity violation in {check}: minimum eigenvalue {eigenvalue:.6e}")]
    ConvexityViolation { check: String, eigenvalue: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("common-noise matrix is not of full row rank; filtering is impossible")]
    SingularSigma,

    #[error("filter degenerated at t = {t}: every posterior component was clipped to zero")]
    DegenerateFilter { t: f64 },

    #[error("Riccati solution blew up (|entry| > 1e12) at t = {t}")]
    BlowUp { t: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("consistency iteration did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("consistency iteration diverging at iteration {iteration} (residual {residual:.3e})")]
    DivergenceDetected { iteration: usize, residual: f64 },

    #[error("regression feature matrix rank deficient at step {step}: rank {rank} of {features} features")]
    RankDeficientRegression {
        step: usize,
        rank: usize,
        features: usize,
    },

    #[error("{paths} regression paths is below 10x the {features} basis features")]
    PathBudgetTooSmall { paths: usize, features: usize },

    #[error("time {t} is not on the grid")]
    OffGrid { t: f64 },

    #[error("trajectory unstable on path {path} at t = {t} (state norm exceeded 1e9)")]
    UnstableTrajectory { path: usize, t: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
