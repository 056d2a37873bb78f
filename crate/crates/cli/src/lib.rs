//! Batch pipeline behind the `latent-mfg` binary:
//! validate → consistency → offsets → simulate → gap.
//!
//! Each stage writes its results to the output directory and later stages read
//! them back from there, so any stage can be re-run on its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use latent_mfg::io::{self, write_file};
use latent_mfg::latent::{simulate_chain, simulate_latent};
use latent_mfg::meanfield::{check_hurwitz, solve_consistency, ConsistencyOptions, MeanFieldGains};
use latent_mfg::model::{assess, check_dimensions, load_model, validate, DriftFamily, ModelSpec, TimeFunction};
use latent_mfg::nash::{gap_curve, AgentRole, GapEstimate, GapOptions};
use latent_mfg::offset::{martingale_diagnostic, solve_joint_offsets, OffsetEstimator, OffsetOptions};
use latent_mfg::rng::{derive_seed, stream, Stream};
use latent_mfg::sim::{paired_cost_gap, simulate_finite, simulate_meanfield, CostReport, SimOptions};
use latent_mfg::{Error, TimeGrid, WonhamFilter};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Consistency,
    Offsets,
    Simulate,
    Gap,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Validate, Stage::Consistency, Stage::Offsets, Stage::Simulate, Stage::Gap];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Consistency => "consistency",
            Stage::Offsets => "offsets",
            Stage::Simulate => "simulate",
            Stage::Gap => "gap",
        }
    }

    fn exit_code(self) -> i32 {
        match self {
            Stage::Validate => 3,
            Stage::Consistency => 4,
            Stage::Offsets => 5,
            Stage::Simulate => 6,
            Stage::Gap => 7,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}` (expected one of validate, consistency, offsets, simulate, gap)"))
    }
}

/// Everything needed to reproduce a run. Stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub workers: Option<usize>,
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    pub schedule: Option<Vec<usize>>,
    pub consistency: ConsistencyOptions,
    pub offset_paths: usize,
    pub basis_degree: usize,
    pub diagnostic_paths: usize,
    pub sim_paths: usize,
    pub gap_paths: usize,
    pub gap_budget: usize,
    /// `None` means every minor type and the major agent.
    pub gap_roles: Option<Vec<AgentRole>>,
    pub dump_trajectories: bool,
    pub overwrite: bool,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<PathBuf>, out: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            model: model.into(),
            out: out.into(),
            seed,
            stages: Stage::ALL.to_vec(),
            workers: None,
            horizon: None,
            steps: None,
            schedule: None,
            consistency: ConsistencyOptions::default(),
            offset_paths: OffsetOptions::default().paths,
            basis_degree: OffsetOptions::default().degree,
            diagnostic_paths: 1000,
            sim_paths: 1000,
            gap_paths: GapOptions::default().paths,
            gap_budget: GapOptions::default().budget,
            gap_roles: None,
            dump_trajectories: false,
            overwrite: false,
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            master: self.seed,
            offsets: derive_seed(self.seed, 1),
            diagnostic: derive_seed(self.seed, 2),
            simulation: derive_seed(self.seed, 3),
            gap: derive_seed(self.seed, 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub offsets: u64,
    pub diagnostic: u64,
    pub simulation: u64,
    pub gap: u64,
}

#[derive(Debug)]
pub struct RunError {
    pub code: i32,
    pub stage: Option<Stage>,
    pub error: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage `{s}` failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for RunError {}

fn fail(stage: Option<Stage>, error: Error) -> RunError {
    let code = match (&error, stage) {
        (Error::Io(_) | Error::Json(_) | Error::Config(_), _) | (_, None) => 2,
        (_, Some(s)) => s.exit_code(),
    };
    RunError { code, stage, error }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub wall_seconds: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub grid: TimeGrid,
    pub schedule: Vec<usize>,
    pub stages: Vec<StageRecord>,
    pub summary: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";

fn apply_overrides(spec: &mut ModelSpec, cfg: &ExperimentConfig) -> latent_mfg::Result<()> {
    if cfg.horizon.is_some() || cfg.steps.is_some() {
        let sampled = |f: &TimeFunction| matches!(f, TimeFunction::Sampled(_));
        if std::iter::once(&spec.major).chain(&spec.minors).any(|a| sampled(&a.dynamics.drift))
            || matches!(spec.common.drift, DriftFamily::Sampled { .. })
        {
            return Err(Error::Config("the grid cannot be overridden for a model with sampled drifts".into()));
        }
        spec.grid = TimeGrid::new(cfg.horizon.unwrap_or(spec.grid.horizon), cfg.steps.unwrap_or(spec.grid.steps))?;
    }
    if let Some(s) = &cfg.schedule {
        spec.population.n_schedule = s.clone();
    }
    Ok(())
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> latent_mfg::Result<()> {
    if cfg.out.exists() {
        let non_empty = fs::read_dir(&cfg.out)?.next().is_some();
        if non_empty && !cfg.overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to write into it",
                cfg.out.display()
            )));
        }
    } else {
        fs::create_dir_all(&cfg.out)?;
    }
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    spec: ModelSpec,
    seeds: Seeds,
    records: Vec<StageRecord>,
    summary: serde_json::Map<String, serde_json::Value>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn gains(&self, fresh: &Option<MeanFieldGains>) -> latent_mfg::Result<MeanFieldGains> {
        match fresh {
            Some(mf) => Ok(mf.clone()),
            None => io::load_gains(&self.path("gains.json"), &self.spec),
        }
    }

    fn offsets(&self, fresh: &Option<OffsetEstimator>) -> latent_mfg::Result<OffsetEstimator> {
        match fresh {
            Some(e) => Ok(e.clone()),
            None => io::load_offsets(&self.path("offsets.json"), &self.spec),
        }
    }
}

/// Runs the selected stages and writes the manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest, RunError> {
    let mut spec = load_model(&cfg.model).map_err(|e| fail(None, e))?;
    apply_overrides(&mut spec, cfg).map_err(|e| fail(None, e))?;
    prepare_out_dir(cfg).map_err(|e| fail(None, e))?;
    let mut ctx = Ctx { cfg, spec, seeds: cfg.seeds(), records: Vec::new(), summary: Default::default() };
    let mut stages = cfg.stages.clone();
    stages.sort();
    stages.dedup();

    if !stages.contains(&Stage::Validate) {
        check_dimensions(&ctx.spec).map_err(|e| fail(Some(Stage::Validate), e))?;
        validate(&ctx.spec).map_err(|e| fail(Some(Stage::Validate), e))?;
    }
    let mut gains = None;
    let mut offsets = None;
    for stage in stages {
        let start = Instant::now();
        let artifacts = match stage {
            Stage::Validate => stage_validate(&mut ctx),
            Stage::Consistency => stage_consistency(&mut ctx, &mut gains),
            Stage::Offsets => stage_offsets(&mut ctx, &gains, &mut offsets),
            Stage::Simulate => stage_simulate(&mut ctx, &gains, &offsets),
            Stage::Gap => stage_gap(&mut ctx, &gains, &offsets),
        }
        .map_err(|e| fail(Some(stage), e))?;
        let wall_seconds = start.elapsed().as_secs_f64();
        log::info!("stage {stage} done in {wall_seconds:.2}s");
        ctx.records.push(StageRecord { stage, wall_seconds, artifacts });
    }

    let manifest = Manifest {
        tool: "latent-mfg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds: ctx.seeds,
        grid: ctx.spec.grid,
        schedule: ctx.spec.population.n_schedule.clone(),
        stages: ctx.records,
        summary: serde_json::Value::Object(ctx.summary),
    };
    io::write_json(&cfg.out.join(MANIFEST), &manifest).map_err(|e| fail(None, e))?;
    Ok(manifest)
}

fn stage_validate(ctx: &mut Ctx<'_>) -> latent_mfg::Result<Vec<String>> {
    check_dimensions(&ctx.spec)?;
    let report = assess(&ctx.spec);
    io::write_json(&ctx.path("validation.json"), &report)?;
    ctx.summary.insert("validation_passed".into(), json!(report.passed()));
    validate(&ctx.spec)?;
    Ok(vec!["validation.json".into()])
}

fn stage_consistency(ctx: &mut Ctx<'_>, gains: &mut Option<MeanFieldGains>) -> latent_mfg::Result<Vec<String>> {
    let mf = solve_consistency(&ctx.spec, &ctx.cfg.consistency)?;
    let hurwitz = check_hurwitz(&mf, &ctx.spec);
    let mut artifacts = vec!["gains.json".to_string(), "consistency.json".to_string(), "riccati_major.csv".to_string()];
    io::save_gains(&ctx.path("gains.json"), &ctx.spec, &mf)?;
    io::write_json(
        &ctx.path("consistency.json"),
        &json!({
            "iterations": mf.iterations,
            "residual": mf.residual,
            "residual_history": mf.residual_history,
            "hurwitz_max_real_eig": hurwitz.max_real_eig,
            "hurwitz_max_real_eig_over_grid": hurwitz.max_real_eig_over_grid,
            "hurwitz_passed": hurwitz.passed(),
        }),
    )?;
    write_file(&ctx.path("riccati_major.csv"), |w| Ok(mf.pi0.write_csv(w)?))?;
    for (k, p) in mf.pik.iter().enumerate() {
        let name = format!("riccati_minor{k}.csv");
        write_file(&ctx.path(&name), |w| Ok(p.write_csv(w)?))?;
        artifacts.push(name);
    }
    if !hurwitz.passed() {
        log::warn!("stability check failed: max real eigenvalue {:.3e}", hurwitz.max_real_eig);
    }
    ctx.summary.insert("consistency_iterations".into(), json!(mf.iterations));
    ctx.summary.insert("consistency_residual".into(), json!(mf.residual));
    ctx.summary.insert("hurwitz_passed".into(), json!(hurwitz.passed()));
    *gains = Some(mf);
    Ok(artifacts)
}

fn stage_offsets(
    ctx: &mut Ctx<'_>,
    gains: &Option<MeanFieldGains>,
    offsets: &mut Option<OffsetEstimator>,
) -> latent_mfg::Result<Vec<String>> {
    let mf = ctx.gains(gains)?;
    let opts = OffsetOptions {
        paths: ctx.cfg.offset_paths,
        degree: ctx.cfg.basis_degree,
        seed: ctx.seeds.offsets,
        ..Default::default()
    };
    let est = solve_joint_offsets(&ctx.spec, &mf, &opts)?;
    io::save_offsets(&ctx.path("offsets.json"), &est)?;
    let diag = martingale_diagnostic(&ctx.spec, &mf, &est, ctx.cfg.diagnostic_paths, ctx.seeds.diagnostic)?;
    io::write_json(
        &ctx.path("offset_diagnostics.json"),
        &json!({
            "basis": est.basis.describe(),
            "s0_stderr": est.s0_stderr,
            "martingale_pass_fraction": diag.pass_fraction(),
            "martingale": diag,
        }),
    )?;
    ctx.summary.insert("martingale_pass_fraction".into(), json!(diag.pass_fraction()));
    *offsets = Some(est);
    Ok(vec!["offsets.json".into(), "offset_diagnostics.json".into()])
}

fn stage_simulate(
    ctx: &mut Ctx<'_>,
    gains: &Option<MeanFieldGains>,
    offsets: &Option<OffsetEstimator>,
) -> latent_mfg::Result<Vec<String>> {
    let mf = ctx.gains(gains)?;
    let est = ctx.offsets(offsets)?;
    let spec = &ctx.spec;
    let seed = ctx.seeds.simulation;
    let opts = SimOptions { paths: ctx.cfg.sim_paths, seed, record: false, tagged_type: None };
    let mut artifacts = Vec::new();
    let mut reports: Vec<CostReport> = Vec::new();
    let mut moments = Vec::new();

    for &n in &spec.population.n_schedule {
        let out = simulate_finite(spec, &mf, &est, n, &opts)?;
        let name = format!("costs_N{n}.csv");
        write_file(&ctx.path(&name), |w| io::write_cost_table(w, &out.report))?;
        artifacts.push(name);
        if ctx.cfg.dump_trajectories {
            let dump = simulate_finite(spec, &mf, &est, n, &SimOptions { paths: opts.paths.min(5), record: true, ..opts })?;
            let name = format!("trajectories_N{n}.csv");
            write_file(&ctx.path(&name), |w| io::write_trajectories(w, spec, &dump.paths))?;
            artifacts.push(name);
        }
        moments.push(out.moments);
        reports.push(out.report);
    }
    let inf = simulate_meanfield(spec, &mf, &est, &opts)?;
    write_file(&ctx.path("costs_meanfield.csv"), |w| io::write_cost_table(w, &inf.report))?;
    artifacts.push("costs_meanfield.csv".into());
    moments.push(inf.moments);

    write_file(&ctx.path("cost_convergence.csv"), |w| {
        use std::io::Write;
        writeln!(w, "population,class,cost,meanfield_cost,diff,abs_diff,diff_stderr,paths")?;
        for rep in &reports {
            let classes = std::iter::once((None, &rep.major, &inf.report.major))
                .chain(rep.minor_by_type.iter().zip(&inf.report.minor_by_type).enumerate().map(|(k, (a, b))| (Some(k), a, b)));
            for (class, a, b) in classes {
                let g = paired_cost_gap(rep, &inf.report, class);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    rep.population.unwrap_or(0),
                    a.label,
                    a.mean,
                    b.mean,
                    g.diff,
                    g.diff.abs(),
                    g.stderr,
                    g.paths
                )?;
            }
        }
        Ok(())
    })?;
    artifacts.push("cost_convergence.csv".into());
    reports.push(inf.report);
    write_file(&ctx.path("cost_summary.csv"), |w| io::write_cost_summary(w, &reports))?;
    write_file(&ctx.path("moments.csv"), |w| io::write_moments(w, &moments))?;
    artifacts.push("cost_summary.csv".into());
    artifacts.push("moments.csv".into());

    // one filtered sample path, the same one as path 0 of every simulation
    let chain = simulate_chain(&spec.chain, &spec.grid, &mut stream(seed, 0, Stream::Chain));
    let latent = simulate_latent(spec, chain, &mut stream(seed, 0, Stream::Latent));
    let filt = WonhamFilter::new(spec)?.run(&latent)?;
    write_file(&ctx.path("filter.csv"), |w| io::write_filter(w, spec, &latent.yl, &latent.chain, &filt))?;
    artifacts.push("filter.csv".into());
    Ok(artifacts)
}

fn stage_gap(
    ctx: &mut Ctx<'_>,
    gains: &Option<MeanFieldGains>,
    offsets: &Option<OffsetEstimator>,
) -> latent_mfg::Result<Vec<String>> {
    let mf = ctx.gains(gains)?;
    let est = ctx.offsets(offsets)?;
    let spec = &ctx.spec;
    let roles = ctx
        .cfg
        .gap_roles
        .clone()
        .unwrap_or_else(|| (0..spec.types()).map(AgentRole::Minor).chain(std::iter::once(AgentRole::Major)).collect());
    let opts = GapOptions { paths: ctx.cfg.gap_paths, budget: ctx.cfg.gap_budget, seed: ctx.seeds.gap, ..Default::default() };
    let mut all: Vec<GapEstimate> = Vec::new();
    for role in roles {
        all.extend(gap_curve(spec, &mf, &est, &spec.population.n_schedule, role, &opts)?);
    }
    write_file(&ctx.path("gap_curve.csv"), |w| io::write_gap_curve(w, &all))?;
    let worst = all.iter().map(|g| g.gap / g.stderr.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
    ctx.summary.insert("max_gap".into(), json!(all.iter().map(|g| g.gap).fold(0.0, f64::max)));
    ctx.summary.insert("max_gap_over_stderr".into(), json!(worst));
    ctx.summary.insert("gap_budget_exhausted".into(), json!(all.iter().any(|g| g.budget_exhausted)));
    Ok(vec!["gap_curve.csv".into()])
}

/// Reads the configuration stored in a manifest.
pub fn config_from_manifest(path: &Path) -> latent_mfg::Result<ExperimentConfig> {
    let m: Manifest = io::read_json(path)?;
    Ok(m.config)
}
