//! Command-line front end: `solve`, `closed-loop`, `scaling` and `check`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 feasibility-check failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::check::{check_feasibility, CheckReport};
use crate::config::{Experiment, RunConfig};
use crate::linalg::Vector;
use crate::model::DiffDriveModel;
use crate::ocp::OcpSpec;
use crate::scaling::run_scaling;
use crate::sim::{metrics, simulate_min_timing, ClosedLoopSettings, Metrics, NoiseConfig};
use crate::sqp::IterationLog;
use crate::table::Table;
use crate::zoro::{zoro_sqp, ZoroConfig, ZoroOutcome, ZoroStatus};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

/// Tolerance on `h + beta` used by `check`.
pub const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "zoro", version, about = "Zero-order robust NMPC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one robust OCP and write trajectory, tube and solver log.
    Solve(CommonArgs),
    /// Run seeded closed-loop simulations of the diff-drive robot.
    ClosedLoop(CommonArgs),
    /// Measure propagation cost against chain size.
    Scaling(CommonArgs),
    /// Re-verify the files written by `solve` against the tightened constraints.
    Check(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (input directory for `check`); overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Noise seed (first seed for multi-run closed loops).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

/// Outcome of a subcommand that completed without an error.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub message: String,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Scenario(_) | Error::Json(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Integration { .. } | Error::Numerical(_) | Error::Solver(_) | Error::Qp(_) => EXIT_SOLVER,
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code;
/// messages go to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(o) => {
            if o.code == EXIT_OK {
                println!("{}", o.message);
            } else {
                eprintln!("{}", o.message);
            }
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: &Command) -> Result<Outcome> {
    let (args, expected) = match command {
        Command::Solve(a) => (a, Some(Experiment::Solve)),
        Command::ClosedLoop(a) => (a, Some(Experiment::ClosedLoop)),
        Command::Scaling(a) => (a, Some(Experiment::Scaling)),
        Command::Check(a) => (a, None),
    };
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(exp) = expected {
        if cfg.experiment != exp {
            return Err(Error::Config(format!(
                "experiment: config declares {:?} but the {exp:?} subcommand was run",
                cfg.experiment
            )));
        }
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.repeats {
        if r == 0 {
            return Err(Error::Config("--repeats must be at least 1".into()));
        }
        cfg.repeats = r;
        cfg.scaling.repeats = r;
    }
    match command {
        Command::Solve(_) => run_solve(&cfg),
        Command::ClosedLoop(_) => run_closed_loop(&cfg),
        Command::Scaling(_) => run_scaling_cmd(&cfg),
        Command::Check(_) => run_check(&cfg),
    }
}

fn spec_and_zoro(cfg: &RunConfig) -> Result<(&OcpSpec, &ZoroConfig)> {
    match (&cfg.spec, &cfg.zoro) {
        (Some(s), Some(z)) => Ok((s, z)),
        _ => Err(Error::Config("this subcommand needs a solve-type configuration".into())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// `node, t, x_0.., u_0..`; the terminal node has no control and its `u`
/// entries are NaN.
pub fn trajectory_table(spec: &OcpSpec, x: &[Vector], u: &[Vector]) -> Table {
    let (nx, nu) = (spec.nx(), spec.nu());
    let mut header = vec!["node".to_owned(), "t".to_owned()];
    header.extend((0..nx).map(|i| format!("x_{i}")));
    header.extend((0..nu).map(|i| format!("u_{i}")));
    let mut t = Table::new(header);
    for (k, xk) in x.iter().enumerate() {
        let mut row = vec![k as f64, k as f64 * spec.dt()];
        row.extend(xk.iter());
        match u.get(k) {
            Some(uk) => row.extend(uk.iter()),
            None => row.extend(std::iter::repeat_n(f64::NAN, nu)),
        }
        t.rows.push(row);
    }
    t
}

/// Inverse of [`trajectory_table`].
pub fn read_trajectory(spec: &OcpSpec, table: &Table) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let (nx, nu, n) = (spec.nx(), spec.nu(), spec.n_intervals);
    let col = |name: String| {
        table
            .header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Config(format!("trajectory file lacks column {name}")))
    };
    let xc = (0..nx).map(|i| col(format!("x_{i}"))).collect::<Result<Vec<_>>>()?;
    let uc = (0..nu).map(|i| col(format!("u_{i}"))).collect::<Result<Vec<_>>>()?;
    if table.rows.len() != n + 1 {
        return Err(Error::Config(format!("trajectory file has {} rows, expected {}", table.rows.len(), n + 1)));
    }
    let x = table.rows.iter().map(|r| Vector::from_iterator(nx, xc.iter().map(|&j| r[j]))).collect();
    let u = table.rows[..n].iter().map(|r| Vector::from_iterator(nu, uc.iter().map(|&j| r[j]))).collect();
    Ok((x, u))
}

/// `node, P_i_j (row-major), beta_0..`; nodes with fewer constraint rows
/// than the widest node are padded with zero backoffs.
pub fn tube_table(out: &ZoroOutcome) -> Table {
    let nx = out.tube.p.first().map_or(0, |p| p.nrows());
    let width = out.tube.backoff.iter().map(|b| b.len()).max().unwrap_or(0);
    let mut header = vec!["node".to_owned()];
    header.extend((0..nx * nx).map(|i| format!("P_{}_{}", i / nx, i % nx)));
    header.extend((0..width).map(|i| format!("beta_{i}")));
    let mut t = Table::new(header);
    for (k, (p, b)) in out.tube.p.iter().zip(&out.tube.backoff).enumerate() {
        let mut row = vec![k as f64];
        row.extend(p.transpose().iter());
        row.extend(b.iter());
        row.resize(1 + nx * nx + width, 0.0);
        t.rows.push(row);
    }
    t
}

#[derive(Serialize)]
struct SolverLog<'a> {
    status: ZoroStatus,
    iterations: usize,
    /// Fastest wall time over the repeats.
    wall_ns: u64,
    propagation_ns: u64,
    repeats: usize,
    logs: &'a [IterationLog],
}

fn run_solve(cfg: &RunConfig) -> Result<Outcome> {
    let (spec, zcfg) = spec_and_zoro(cfg)?;
    let runs = (0..cfg.repeats)
        .into_par_iter()
        .map(|_| {
            let start = Instant::now();
            let out = zoro_sqp(spec, zcfg, None, &cfg.sqp)?;
            Ok((out, start.elapsed().as_nanos() as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let wall_ns = runs.iter().map(|r| r.1).min().unwrap_or(0);
    let out = &runs[0].0;
    if runs.iter().any(|(o, _)| o.iterate != out.iterate) {
        return Err(Error::Numerical("repeated solves disagree".into()));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    trajectory_table(spec, &out.iterate.x, &out.iterate.u).write(&cfg.output_dir.join("trajectory.csv"))?;
    tube_table(out).write(&cfg.output_dir.join("tube.csv"))?;
    write_json(
        &cfg.output_dir.join("solver_log.json"),
        &SolverLog {
            status: out.status,
            iterations: out.iterations,
            wall_ns,
            propagation_ns: out.propagation_ns,
            repeats: cfg.repeats,
            logs: &out.logs,
        },
    )?;
    let message = format!(
        "solve: {:?} after {} iterations; files in {}",
        out.status,
        out.iterations,
        cfg.output_dir.display()
    );
    let code = if out.status == ZoroStatus::Converged { EXIT_OK } else { EXIT_SOLVER };
    Ok(Outcome { code, message })
}

fn run_check(cfg: &RunConfig) -> Result<Outcome> {
    let (spec, zcfg) = spec_and_zoro(cfg)?;
    let table = Table::read(&cfg.output_dir.join("trajectory.csv"))?;
    let (x, u) = read_trajectory(spec, &table)?;
    let rep: CheckReport = check_feasibility(spec, zcfg, &x, &u, CHECK_TOL)?;
    if rep.passed() {
        return Ok(Outcome {
            code: EXIT_OK,
            message: format!("check passed: max h + beta = {:.3e}, max defect = {:.3e}", rep.max_violation, rep.max_defect),
        });
    }
    let mut lines = vec![format!(
        "check failed: x0 error {:.3e}, max defect {:.3e}, {} violated row(s)",
        rep.x0_error,
        rep.max_defect,
        rep.violations.len()
    )];
    lines.extend(
        rep.violations
            .iter()
            .map(|v| format!("  node {} row {}: h = {:.6e}, beta = {:.6e}, h + beta = {:.6e}", v.node, v.row, v.h, v.backoff, v.h + v.backoff)),
    );
    Ok(Outcome {
        code: EXIT_INFEASIBLE,
        message: lines.join("\n"),
    })
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    completed: bool,
    failure: Option<String>,
    metrics: Option<Metrics>,
}

#[derive(Serialize)]
struct ClosedLoopSummary {
    runs: usize,
    completed: usize,
    collision_steps: usize,
    violations: usize,
    min_clearance: f64,
    per_run: Vec<RunSummary>,
}

fn run_closed_loop(cfg: &RunConfig) -> Result<Outcome> {
    let scenario = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| Error::Config("closed_loop needs the diff_drive model".into()))?;
    let covariance = cfg.noise_covariance.clone().expect("resolved with the spec");
    let settings = ClosedLoopSettings {
        controller: cfg.closed_loop.controller,
        n_steps: cfg.closed_loop.n_steps,
        sqp: cfg.sqp,
        zoro: cfg.zoro.clone(),
    };
    let seeds: Vec<u64> = (0..cfg.closed_loop.runs as u64).map(|i| cfg.seed + i).collect();
    let traces = seeds
        .par_iter()
        .map(|&seed| {
            let noise = NoiseConfig {
                covariance: covariance.clone(),
                seed,
            };
            simulate_min_timing(&DiffDriveModel, scenario, &settings, &noise, cfg.repeats)
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut summary = ClosedLoopSummary {
        runs: traces.len(),
        completed: 0,
        collision_steps: 0,
        violations: 0,
        min_clearance: f64::INFINITY,
        per_run: vec![],
    };
    for tr in &traces {
        tr.write(&cfg.output_dir, &format!("closed_loop_{}", tr.meta.seed))?;
        let m = (!tr.steps.is_empty()).then(|| metrics(tr)).transpose()?;
        if let Some(m) = &m {
            summary.collision_steps += m.collision_steps;
            summary.violations += m.violations;
            summary.min_clearance = summary.min_clearance.min(m.min_clearance);
        }
        summary.completed += tr.completed() as usize;
        summary.per_run.push(RunSummary {
            seed: tr.meta.seed,
            completed: tr.completed(),
            failure: tr.meta.failure.as_ref().map(|f| format!("step {}: {}", f.step, f.reason)),
            metrics: m,
        });
    }
    write_json(&cfg.output_dir.join("closed_loop_summary.json"), &summary)?;
    let message = format!(
        "closed loop: {}/{} runs completed, {} collision step(s), min clearance {:.4}; files in {}",
        summary.completed,
        summary.runs,
        summary.collision_steps,
        summary.min_clearance,
        cfg.output_dir.display()
    );
    let code = if summary.completed == summary.runs { EXIT_OK } else { EXIT_SOLVER };
    Ok(Outcome { code, message })
}

fn run_scaling_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let rep = run_scaling(&cfg.scaling)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("scaling.json"), &rep)?;
    let slope = rep
        .propagation_slope
        .map_or_else(|| rep.note.clone().unwrap_or_default(), |s| format!("propagation slope {s:.3}"));
    let message = format!("scaling: {} size(s), {slope}; report in {}", rep.points.len(), cfg.output_dir.display());
    let code = if rep.partial { EXIT_SOLVER } else { EXIT_OK };
    Ok(Outcome { code, message })
}
