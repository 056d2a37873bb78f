use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_mfg::nash::AgentRole;
use latent_mfg_cli::{config_from_manifest, run, ExperimentConfig, Stage};

/// Major-minor LQG mean field games with a latent-chain common process.
#[derive(Debug, Parser)]
#[command(name = "latent-mfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline: validate, consistency, offsets, simulate, gap.
    ///
    /// Exit codes: 2 configuration or I/O, 3 validation, 4 consistency,
    /// 5 offset regression, 6 simulation, 7 gap estimation.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Model file (TOML). See docs/model-schema.md.
    #[arg(long, required_unless_present = "from_manifest")]
    model: Option<PathBuf>,
    /// Output directory; must be empty or absent unless --overwrite is given.
    #[arg(long, required_unless_present = "from_manifest")]
    out: Option<PathBuf>,
    /// Master seed. Every random stream is derived from it.
    #[arg(long, required_unless_present = "from_manifest")]
    seed: Option<u64>,
    /// Reuse the configuration stored in a previous run's manifest.json.
    /// Flags given alongside it override the stored values.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Comma-separated subset of: validate, consistency, offsets, simulate, gap.
    /// Missing inputs are read from the output directory.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Consistency fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Damping weight on the new iterate, in (0, 1].
    #[arg(long)]
    damping: Option<f64>,
    /// Maximum consistency iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Regression Monte Carlo paths for the offsets.
    #[arg(long)]
    offset_paths: Option<usize>,
    /// Total degree of the polynomial regression basis.
    #[arg(long)]
    basis_degree: Option<usize>,
    /// Fresh paths for the offset martingale diagnostic.
    #[arg(long)]
    diagnostic_paths: Option<usize>,
    /// Monte Carlo paths per population size.
    #[arg(long)]
    sim_paths: Option<usize>,
    /// Paths per candidate in the deviation search.
    #[arg(long)]
    gap_paths: Option<usize>,
    /// Candidate evaluations per deviation search.
    #[arg(long)]
    gap_budget: Option<usize>,
    /// Deviating agents, e.g. `major,minor0`. Default: every minor type and the major agent.
    #[arg(long, value_delimiter = ',')]
    gap_roles: Option<Vec<AgentRole>>,
    /// Population sizes, e.g. `2,5,10,20,50`. Default: the model's schedule.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
    /// Horizon override.
    #[arg(long)]
    horizon: Option<f64>,
    /// Grid step count override.
    #[arg(long)]
    steps: Option<usize>,
    /// Also write per-agent trajectories for the first few paths.
    #[arg(long)]
    dump_trajectories: bool,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

fn build_config(a: RunArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = match &a.from_manifest {
        Some(p) => config_from_manifest(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        None => ExperimentConfig::new(
            a.model.clone().expect("required by clap"),
            a.out.clone().expect("required by clap"),
            a.seed.expect("required by clap"),
        ),
    };
    if let Some(v) = a.model {
        cfg.model = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.stages {
        cfg.stages = v;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    if let Some(v) = a.tol {
        cfg.consistency.tol = v;
    }
    if let Some(v) = a.damping {
        cfg.consistency.damping = v;
    }
    if let Some(v) = a.max_iter {
        cfg.consistency.max_iter = v;
    }
    if let Some(v) = a.offset_paths {
        cfg.offset_paths = v;
    }
    if let Some(v) = a.basis_degree {
        cfg.basis_degree = v;
    }
    if let Some(v) = a.diagnostic_paths {
        cfg.diagnostic_paths = v;
    }
    if let Some(v) = a.sim_paths {
        cfg.sim_paths = v;
    }
    if let Some(v) = a.gap_paths {
        cfg.gap_paths = v;
    }
    if let Some(v) = a.gap_budget {
        cfg.gap_budget = v;
    }
    if a.gap_roles.is_some() {
        cfg.gap_roles = a.gap_roles;
    }
    if a.schedule.is_some() {
        cfg.schedule = a.schedule;
    }
    if a.horizon.is_some() {
        cfg.horizon = a.horizon;
    }
    if a.steps.is_some() {
        cfg.steps = a.steps;
    }
    cfg.dump_trajectories |= a.dump_trajectories;
    cfg.overwrite = a.overwrite;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Command::Run(args) = cli.command;
    let cfg = match build_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(w) = cfg.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start {w} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cfg) {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
