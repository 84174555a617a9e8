//! Command-line front end: resolves a scenario, runs the closed loop and
//! writes CSV, SVG and JSON artifacts.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use gsmppi::cbf::finite_difference_gradient;
use gsmppi::planner::AuditStats;
use gsmppi::scenarios::{ObstacleSpec, WallSpec};
use gsmppi::{
    run, CostSpec, Error as CoreError, GoalSpec, Planner, ScenarioFile, StateVec, TrajectoryLog,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub mod svg;

#[derive(Debug, Clone, Parser)]
#[command(
    name = "gsmppi",
    version,
    about = "Safe sampling-based planning on a unicycle arena"
)]
pub struct Args {
    /// Scenario JSON file. Defaults to the built-in arena.
    #[arg(long)]
    pub scenario: Option<PathBuf>,

    /// Index into the scenario's goal list.
    #[arg(long, default_value_t = 0, conflicts_with = "goal_xy")]
    pub goal: usize,

    /// Explicit goal position, e.g. `--goal-xy=3,4.5`.
    #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
    pub goal_xy: Option<[f64; 2]>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Comma-separated artifacts: csv, svg, rollout-audit.
    #[arg(long, value_delimiter = ',', default_value = "csv")]
    pub emit: Vec<Emit>,

    /// Check the scenario and initial state, then exit without simulating.
    #[arg(long)]
    pub validate: bool,

    /// Weight samples by the path cost plus the control-cost correction.
    #[arg(long)]
    pub s_correction: bool,

    /// Total simulated time in seconds (overrides the scenario).
    #[arg(long)]
    pub horizon: Option<f64>,

    /// Rollout worker threads. Output does not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Emit {
    Csv,
    Svg,
    RolloutAudit,
}

fn parse_xy(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected x,y, got {s:?}"));
    }
    let mut out = [0.0f64; 2];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
        if !o.is_finite() {
            return Err(format!("{p:?} is not finite"));
        }
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid scenario. Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// The run started but stopped on an error. Exit code 1.
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Validation(_) | CliError::Io(_) => 1,
        }
    }
}

/// Everything that determines the simulated trajectory. Its canonical JSON
/// is hashed into every artifact. Worker count is deliberately absent.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub scenario: ScenarioFile,
    pub goal: [f64; 2],
    pub seed: u64,
    pub s_correction: bool,
}

impl ResolvedConfig {
    pub fn from_args(args: &Args) -> Result<Self, CliError> {
        let mut scenario = match &args.scenario {
            Some(p) => ScenarioFile::load(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => ScenarioFile::default_file(),
        };
        if let Some(t) = args.horizon {
            scenario.sim.total_time = t;
        }
        let goal = match args.goal_xy {
            Some(xy) => xy,
            None => *scenario.goals.get(args.goal).ok_or_else(|| {
                CliError::Config(format!(
                    "goal index {} out of range ({} goals)",
                    args.goal,
                    scenario.goals.len()
                ))
            })?,
        };
        Ok(Self {
            scenario,
            goal,
            seed: args.seed,
            s_correction: args.s_correction,
        })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub goal: [f64; 2],
    pub status: String,
    pub error: Option<String>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub goal_distance: Option<f64>,
    pub stopped_early: bool,
    pub min_h: f64,
    pub min_cascade: f64,
    pub min_constraint: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub seed: u64,
    pub slack: f64,
    pub rollouts: AuditStats,
    pub executed: AuditStats,
}

/// Result of a completed or aborted run, after artifacts were written.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    pub log: TrajectoryLog,
    pub written: Vec<PathBuf>,
}

pub fn header_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

pub fn trajectory_csv(log: &TrajectoryLog, hash: &str, seed: u64) -> String {
    let mut out = header_line(hash, seed);
    out.push_str("t,qx,qy,nu,theta,v1,v2,u1,u2,h,min_b,min_h,omega_at_v,active\n");
    for s in &log.steps {
        let row = [s.t]
            .into_iter()
            .chain(s.x.iter().copied())
            .chain(s.v.iter().copied())
            .chain(s.u.iter().copied())
            .chain([s.h, s.min_cascade, s.min_constraint, s.filter.omega_at_v]);
        for v in row {
            num(&mut out, v);
            out.push(',');
        }
        out.push_str(if s.filter.constraint_active {
            "1\n"
        } else {
            "0\n"
        });
    }
    out
}

pub fn planner_csv(log: &TrajectoryLog, hash: &str, seed: u64) -> String {
    let mut out = header_line(hash, seed);
    out.push_str("t,best_cost,eta,weight_entropy\n");
    for t in &log.ticks {
        for (i, v) in [t.t, t.best_cost, t.eta, t.weight_entropy]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                out.push(',');
            }
            num(&mut out, v);
        }
        out.push('\n');
    }
    out
}

/// Gradient check of the composite barrier at `x` against central
/// differences. Returns the relative error.
pub fn gradient_check(cbf: &gsmppi::CompositeCbf, x: &StateVec) -> Result<f64, CoreError> {
    let (_, grad) = cbf.value_and_gradient(x)?;
    let fd = finite_difference_gradient(|y| cbf.composite_value(y), x, 1e-6);
    Ok((&grad - &fd).norm() / grad.norm().max(1e-12))
}

/// Checks the scenario without simulating: start and goals inside the safe
/// set, analytic gradients consistent with finite differences.
pub fn validate(config: &ResolvedConfig) -> Result<String, CliError> {
    let sc = config
        .scenario
        .clone()
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut report = String::new();
    let start = sc.cbf.membership(&sc.start);
    writeln!(
        report,
        "start h = {:.6e}, min cascade = {:.6e}",
        start.h, start.min_cascade
    )
    .unwrap();
    if !start.in_safe_set {
        return Err(CliError::Validation(format!(
            "initial state is outside the safe set (h = {:.3e}, min cascade = {:.3e})",
            start.h, start.min_cascade
        )));
    }
    let rel =
        gradient_check(&sc.cbf, &sc.start).map_err(|e| CliError::Validation(e.to_string()))?;
    writeln!(report, "start gradient relative error = {rel:.3e}").unwrap();
    if !(rel < 1e-5) {
        return Err(CliError::Validation(format!(
            "gradient check failed at start: {rel:.3e}"
        )));
    }
    for (i, g) in sc.file.goals.iter().enumerate() {
        let mut x = sc.start.clone();
        x[0] = g[0];
        x[1] = g[1];
        x[2] = 0.0;
        let m = sc.cbf.membership(&x);
        writeln!(
            report,
            "goal {i} ({}, {}) at rest: h = {:.6e}",
            g[0], g[1], m.h
        )
        .unwrap();
        if !m.in_safe_set {
            return Err(CliError::Validation(format!(
                "goal {i} is outside the safe set"
            )));
        }
    }
    writeln!(report, "config_hash={} seed={}", config.hash(), config.seed).unwrap();
    Ok(report)
}

/// Resolves the configuration, runs the closed loop and writes artifacts.
/// Partial artifacts are written when the run aborts.
pub fn execute(args: &Args) -> Result<Outcome, CliError> {
    let config = ResolvedConfig::from_args(args)?;
    let sc = config
        .scenario
        .clone()
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let hash = config.hash();
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let planner = Planner::new(
        sc.planner.clone().with_s_correction(config.s_correction),
        config.seed,
    )
    .with_workers(workers)
    .map_err(|e| CliError::Config(e.to_string()))?;
    let goal = GoalSpec::new(config.goal);

    log::info!(
        "config_hash={hash} seed={} goal={:?} workers={workers}",
        config.seed,
        config.goal
    );
    let (log, error) = match run(&sc.system, &sc.cbf, &goal, &sc.start, &planner, &sc.sim) {
        Ok(log) => (log, None),
        Err(abort) => (*abort.log, Some(abort.cause.to_string())),
    };

    fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    let put = |written: &mut Vec<PathBuf>, name: &str, body: &str| -> std::io::Result<()> {
        let path = args.out.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };

    if args.emit.contains(&Emit::Csv) {
        put(
            &mut written,
            "trajectory.csv",
            &trajectory_csv(&log, &hash, config.seed),
        )?;
        put(
            &mut written,
            "planner.csv",
            &planner_csv(&log, &hash, config.seed),
        )?;
    }
    if args.emit.contains(&Emit::Svg) {
        let obstacles: &[ObstacleSpec] = &config.scenario.obstacles;
        let wall: &WallSpec = &config.scenario.wall;
        put(
            &mut written,
            "arena.svg",
            &svg::arena(obstacles, wall, &log, config.goal, &hash, config.seed),
        )?;
        put(
            &mut written,
            "signals.svg",
            &svg::signals(&log, &hash, config.seed),
        )?;
    }
    if args.emit.contains(&Emit::RolloutAudit) {
        let report = AuditReport {
            config_hash: hash.clone(),
            seed: config.seed,
            slack: gsmppi::SAFETY_SLACK,
            rollouts: log.rollout_audit(),
            executed: log.executed_audit(),
        };
        put(
            &mut written,
            "audit.json",
            &(serde_json::to_string_pretty(&report).unwrap() + "\n"),
        )?;
    }

    let final_x = StateVec::from_vec(log.final_state.clone());
    let mut files: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    files.push("manifest.json".into());
    let manifest = Manifest {
        config_hash: hash,
        seed: config.seed,
        goal: config.goal,
        status: if error.is_some() { "aborted" } else { "ok" }.into(),
        error: error.clone(),
        final_time: log.final_time,
        final_state: log.final_state.clone(),
        goal_distance: goal.goal_distance(&final_x),
        stopped_early: log.stopped_early,
        min_h: log.min_h(),
        min_cascade: log.min_cascade(),
        min_constraint: log.min_constraint(),
        files,
    };
    put(
        &mut written,
        "manifest.json",
        &(serde_json::to_string_pretty(&manifest).unwrap() + "\n"),
    )?;

    match error {
        Some(e) => Err(CliError::Runtime(e)),
        None => Ok(Outcome {
            manifest,
            log,
            written,
        }),
    }
}

/// Entry point shared by the binary and tests. Returns the process exit code.
pub fn main_with_args(args: Args) -> i32 {
    if args.validate {
        let result = ResolvedConfig::from_args(&args).and_then(|c| validate(&c));
        return match result {
            Ok(report) => {
                print!("{report}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        };
    }
    match execute(&args) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            println!(
                "finished t = {:.2} s, goal distance = {}, min h = {:.4e}, outputs in {}",
                m.final_time,
                m.goal_distance.map_or("n/a".into(), |d| format!("{d:.4}")),
                m.min_h,
                display(&args.out)
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
