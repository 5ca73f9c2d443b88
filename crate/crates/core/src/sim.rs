//! Closed-loop simulation of the diff-drive robot under process noise.
//!
//! The plant is integrated with ERK4 over one sample and perturbed by an
//! additive Gaussian draw; the controller sees the true state. Noise is
//! drawn from a seeded ChaCha generator through a fixed factor of the
//! covariance, so a `(seed, config)` pair fully determines a run.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::integrator::{erk4_step, IntegratorConfig};
use crate::linalg::{is_finite, psd_factor, Mat, Vector};
use crate::model::Model;
use crate::ocp::{build_diff_drive_ocp, DiffDriveScenario, OcpSpec};
use crate::sqp::{SolveStatus, SqpSettings, SqpSolver};
use crate::table::Table;
use crate::zoro::{zoro_rti_feedback, zoro_rti_prepare, zoro_solve, ZoroConfig, ZoroStatus};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub covariance: Mat,
    pub seed: u64,
}

/// Draws `L z` with `z` standard normal and `L L^T` the covariance.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    factor: Mat,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(cfg: &NoiseConfig) -> Result<Self> {
        let c = &cfg.covariance;
        if c.nrows() != c.ncols() {
            return Err(Error::Config(format!("noise covariance must be square, got {}x{}", c.nrows(), c.ncols())));
        }
        if !c.iter().all(|v| v.is_finite()) || (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
            return Err(Error::Config("noise covariance must be finite and symmetric".into()));
        }
        if c.nrows() > 0 && crate::linalg::min_eigenvalue(c) < -1e-12 * c.amax().max(1.0) {
            return Err(Error::Config("noise covariance must be positive semidefinite".into()));
        }
        Ok(Self {
            factor: psd_factor(c),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn sample(&mut self) -> Vector {
        let z = Vector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(&mut self.rng));
        &self.factor * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    NominalRti,
    ZoroRti,
    ZoroSqp,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSettings {
    pub controller: ControllerKind,
    pub n_steps: usize,
    pub sqp: SqpSettings,
    /// Required by the robust controllers, ignored by the nominal one.
    pub zoro: Option<ZoroConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTimings {
    pub prepare_ns: u64,
    pub propagation_ns: u64,
    pub feedback_ns: u64,
    pub qp_ns: u64,
    pub total_ns: u64,
}

impl StepTimings {
    fn min(self, o: Self) -> Self {
        Self {
            prepare_ns: self.prepare_ns.min(o.prepare_ns),
            propagation_ns: self.propagation_ns.min(o.propagation_ns),
            feedback_ns: self.feedback_ns.min(o.feedback_ns),
            qp_ns: self.qp_ns.min(o.qp_ns),
            total_ns: self.total_ns.min(o.total_ns),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// True plant state at the start of the step (the measurement).
    pub x: Vector,
    pub u: Vector,
    pub clearance: Vec<f64>,
    /// Smallest `ub - g` over the nominal stage rows at `(x, u)`.
    pub margin: f64,
    /// Number of nominal stage rows breached at `(x, u)`.
    pub violated_rows: usize,
    pub sqp_iterations: usize,
    pub timings: StepTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub controller: ControllerKind,
    pub seed: u64,
    pub n_steps: usize,
    pub sample_time: f64,
    pub scenario: DiffDriveScenario,
    pub gamma: Option<f64>,
    pub final_state: Vec<f64>,
    pub margins: Vec<f64>,
    pub failure: Option<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub meta: TraceMeta,
    pub steps: Vec<StepRecord>,
}

impl ClosedLoopTrace {
    pub fn completed(&self) -> bool {
        self.meta.failure.is_none() && self.steps.len() == self.meta.n_steps
    }

    /// CSV layout: `step, t, x_0.., u_0.., clearance_0.., t_prepare_ns,
    /// t_propagation_ns, t_feedback_ns, t_qp_ns`.
    pub fn to_table(&self) -> Table {
        let nx = self.steps.first().map_or(5, |s| s.x.len());
        let nu = self.steps.first().map_or(2, |s| s.u.len());
        let no = self.meta.scenario.obstacles.len();
        let mut header = vec!["step".to_owned(), "t".to_owned()];
        header.extend((0..nx).map(|i| format!("x_{i}")));
        header.extend((0..nu).map(|i| format!("u_{i}")));
        header.extend((0..no).map(|i| format!("clearance_{i}")));
        header.extend(["t_prepare_ns", "t_propagation_ns", "t_feedback_ns", "t_qp_ns"].map(str::to_owned));
        let mut table = Table::new(header);
        for s in &self.steps {
            let mut row = vec![s.step as f64, s.t];
            row.extend(s.x.iter());
            row.extend(s.u.iter());
            row.extend(&s.clearance);
            row.extend([s.timings.prepare_ns, s.timings.propagation_ns, s.timings.feedback_ns, s.timings.qp_ns].map(|v| v as f64));
            table.rows.push(row);
        }
        table
    }

    /// Writes `<stem>.csv` and the sibling `<stem>.json` metadata.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        self.to_table().write(&dir.join(format!("{stem}.csv")))?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        Ok(())
    }
}

fn plant_step(plant: &dyn Model, x: &Vector, u: &Vector, dt: f64) -> Result<Vector> {
    Ok(erk4_step(plant, x, u, &IntegratorConfig::erk4(dt))?.x_next)
}

/// Breaches smaller than this are solver round-off, not violations.
pub const VIOLATION_TOL: f64 = 1e-6;

fn nominal_margin(spec: &OcpSpec, x: &Vector, u: &Vector) -> (f64, usize) {
    let set = &spec.stage_constraints;
    let (g, _) = set.eval_functions(x, u);
    let slack = set.upper_bounds() - g;
    (slack.min(), slack.iter().filter(|s| **s < -VIOLATION_TOL).count())
}

/// Runs one closed-loop experiment on the diff-drive scenario.
///
/// Before the first step the controller's OCP is solved to convergence
/// from the constant initial guess (robustly for the zoRO controllers).
/// A controller failure truncates the trace and is recorded in its
/// metadata.
pub fn simulate_closed_loop(
    plant: &dyn Model,
    scenario: &DiffDriveScenario,
    settings: &ClosedLoopSettings,
    noise: &NoiseConfig,
) -> Result<ClosedLoopTrace> {
    let spec = build_diff_drive_ocp(scenario)?;
    let dt = spec.dt();
    let nx = spec.nx();
    if plant.nx() != nx || plant.nu() != spec.nu() {
        return Err(Error::dim("plant state", nx, plant.nx()));
    }
    if noise.covariance.nrows() != nx {
        return Err(Error::dim("noise covariance", nx, noise.covariance.nrows()));
    }
    let zoro = match (settings.controller, &settings.zoro) {
        (ControllerKind::NominalRti, _) => None,
        (_, Some(cfg)) => {
            cfg.validate(&spec)?;
            Some(cfg)
        }
        (_, None) => return Err(Error::Config("robust controller requires a zoro block".into())),
    };
    let mut sampler = NoiseSampler::new(noise)?;
    let mut solver = SqpSolver::new(spec.clone(), None, settings.sqp)?;

    let mut meta = TraceMeta {
        controller: settings.controller,
        seed: noise.seed,
        n_steps: settings.n_steps,
        sample_time: dt,
        scenario: scenario.clone(),
        gamma: zoro.map(|c| c.gamma),
        final_state: vec![],
        margins: vec![],
        failure: None,
    };
    let mut steps = Vec::with_capacity(settings.n_steps);
    let mut x = spec.x0.clone();

    let init_failure = match zoro {
        Some(cfg) => {
            let out = zoro_solve(&mut solver, cfg, &x)?;
            matches!(
                out.status,
                ZoroStatus::TightenedInfeasible | ZoroStatus::NominalInfeasible | ZoroStatus::QpFailed
            )
            .then(|| format!("initial robust solve: {:?}", out.status))
        }
        None => {
            let rep = solver.solve(&x, None)?;
            matches!(rep.status, SolveStatus::QpInfeasible | SolveStatus::QpFailed)
                .then(|| format!("initial solve: {:?}", rep.status))
        }
    };
    if let Some(reason) = init_failure {
        meta.failure = Some(FailureRecord { step: 0, reason });
        meta.final_state = x.iter().copied().collect();
        return Ok(ClosedLoopTrace { meta, steps });
    }

    for step in 0..settings.n_steps {
        let t = step as f64 * dt;
        let start = Instant::now();
        let mut tm = StepTimings::default();
        let (stage_ref, term_ref) = scenario.references_from(scenario.reference_start(t, &x));
        if step > 0 {
            solver.shift();
        }
        solver.set_reference(stage_ref, term_ref)?;
        let outcome: std::result::Result<(Vector, usize), String> = match (settings.controller, zoro) {
            (ControllerKind::ZoroSqp, Some(cfg)) => {
                let out = zoro_solve(&mut solver, cfg, &x)?;
                for l in &out.logs {
                    tm.prepare_ns += l.timings.prepare_ns;
                    tm.feedback_ns += l.timings.feedback_ns;
                    tm.qp_ns += l.timings.qp_ns;
                }
                tm.propagation_ns = out.propagation_ns;
                match out.status {
                    ZoroStatus::Converged | ZoroStatus::MaxIter => Ok((out.iterate.u[0].clone(), out.iterations)),
                    s => Err(format!("{s:?}")),
                }
            }
            (kind, cfg) => {
                let fb = if kind == ControllerKind::ZoroRti {
                    let (_, prop_ns) = zoro_rti_prepare(&mut solver, cfg.expect("checked above"))?;
                    tm.propagation_ns = prop_ns;
                    tm.prepare_ns = solver.timings().prepare_ns;
                    zoro_rti_feedback(&mut solver, &x)?
                } else {
                    solver.prepare()?;
                    tm.prepare_ns = solver.timings().prepare_ns;
                    solver.feedback(&x)?
                };
                tm.feedback_ns = solver.timings().feedback_ns;
                tm.qp_ns = solver.timings().qp_ns;
                if fb.applied {
                    Ok((fb.u0, 1))
                } else {
                    Err(format!("QP {:?}", fb.qp_status))
                }
            }
        };
        tm.total_ns = start.elapsed().as_nanos() as u64;
        let (u, iters) = match outcome {
            Ok(v) => v,
            Err(reason) => {
                meta.failure = Some(FailureRecord { step, reason });
                break;
            }
        };
        let (margin, violated_rows) = nominal_margin(&spec, &x, &u);
        meta.margins.push(margin);
        steps.push(StepRecord {
            step,
            t,
            clearance: scenario.clearances(&x),
            x: x.clone(),
            u: u.clone(),
            margin,
            violated_rows,
            sqp_iterations: iters,
            timings: tm,
        });
        x = plant_step(plant, &x, &u, dt)? + sampler.sample();
        if !is_finite(&x) {
            meta.failure = Some(FailureRecord {
                step,
                reason: "plant state diverged".into(),
            });
            break;
        }
    }
    meta.final_state = x.iter().copied().collect();
    Ok(ClosedLoopTrace { meta, steps })
}

/// Repeats the same run `repeats` times and keeps the per-step minimum of
/// every timing. Fails if the repetitions do not reproduce the trajectory.
pub fn simulate_min_timing(
    plant: &dyn Model,
    scenario: &DiffDriveScenario,
    settings: &ClosedLoopSettings,
    noise: &NoiseConfig,
    repeats: usize,
) -> Result<ClosedLoopTrace> {
    let mut best = simulate_closed_loop(plant, scenario, settings, noise)?;
    for _ in 1..repeats.max(1) {
        let run = simulate_closed_loop(plant, scenario, settings, noise)?;
        if run.steps.len() != best.steps.len() || run.steps.iter().zip(&best.steps).any(|(a, b)| a.x != b.x || a.u != b.u) {
            return Err(Error::Numerical("repeated simulation is not deterministic".into()));
        }
        for (b, r) in best.steps.iter_mut().zip(&run.steps) {
            b.timings = b.timings.min(r.timings);
        }
    }
    Ok(best)
}

/// Independent runs for each seed, in parallel.
pub fn simulate_seeds(
    plant: &dyn Model,
    scenario: &DiffDriveScenario,
    settings: &ClosedLoopSettings,
    covariance: &Mat,
    seeds: &[u64],
) -> Vec<Result<ClosedLoopTrace>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let noise = NoiseConfig {
                covariance: covariance.clone(),
                seed,
            };
            simulate_closed_loop(plant, scenario, settings, &noise)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl PhaseStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            min: v[0],
            median,
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub prepare: PhaseStats,
    pub propagation: PhaseStats,
    pub feedback: PhaseStats,
    pub qp: PhaseStats,
    pub total: PhaseStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub steps: usize,
    pub completed: bool,
    /// Over all recorded states and the final state.
    pub min_clearance: f64,
    pub collision_steps: usize,
    /// Breached `(step, row)` pairs of the nominal stage constraints.
    pub violations: usize,
    pub timings: TimingReport,
    /// Median over steps of `propagation / total`.
    pub propagation_share_median: f64,
}

pub fn metrics(trace: &ClosedLoopTrace) -> Result<Metrics> {
    if trace.steps.is_empty() {
        return Err(Error::Config("metrics of an empty trace".into()));
    }
    let final_x = Vector::from_vec(trace.meta.final_state.clone());
    let final_clearance = trace.meta.scenario.clearances(&final_x);
    let clearances = trace.steps.iter().flat_map(|s| s.clearance.iter()).chain(&final_clearance);
    let min_clearance = clearances.copied().fold(f64::INFINITY, f64::min);
    let collision_steps = trace
        .steps
        .iter()
        .filter(|s| s.clearance.iter().any(|c| *c <= 0.0))
        .count();
    let col = |f: fn(&StepTimings) -> u64| -> Vec<f64> { trace.steps.iter().map(|s| f(&s.timings) as f64).collect() };
    let shares: Vec<f64> = trace
        .steps
        .iter()
        .map(|s| s.timings.propagation_ns as f64 / (s.timings.total_ns.max(1)) as f64)
        .collect();
    Ok(Metrics {
        steps: trace.steps.len(),
        completed: trace.completed(),
        min_clearance,
        collision_steps,
        violations: trace.steps.iter().map(|s| s.violated_rows).sum(),
        timings: TimingReport {
            prepare: PhaseStats::of(&col(|t| t.prepare_ns)),
            propagation: PhaseStats::of(&col(|t| t.propagation_ns)),
            feedback: PhaseStats::of(&col(|t| t.feedback_ns)),
            qp: PhaseStats::of(&col(|t| t.qp_ns)),
            total: PhaseStats::of(&col(|t| t.total_ns)),
        },
        propagation_share_median: PhaseStats::of(&shares).median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::diag;
    use crate::ocp::Obstacle;

    #[test]
    fn constant_timings_have_equal_quantiles() {
        let s = PhaseStats::of(&[5.0; 7]);
        assert_eq!((s.min, s.median, s.max), (5.0, 5.0, 5.0));
        let s = PhaseStats::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.min, s.median, s.max), (1.0, 2.5, 4.0));
    }

    #[test]
    fn same_seed_same_noise() {
        let cfg = NoiseConfig {
            covariance: diag(&[1.0, 2.0, 0.0]),
            seed: 42,
        };
        let mut a = NoiseSampler::new(&cfg).unwrap();
        let mut b = NoiseSampler::new(&cfg).unwrap();
        for _ in 0..100 {
            let (x, y) = (a.sample(), b.sample());
            assert_eq!(x, y);
            assert_eq!(x[2], 0.0);
        }
        let mut c = NoiseSampler::new(&NoiseConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.sample(), c.sample());
    }

    #[test]
    fn invalid_covariance_rejected() {
        let bad = NoiseConfig {
            covariance: diag(&[1.0, -1.0]),
            seed: 0,
        };
        assert!(NoiseSampler::new(&bad).is_err());
        let ragged = NoiseConfig {
            covariance: Mat::zeros(2, 3),
            seed: 0,
        };
        assert!(NoiseSampler::new(&ragged).is_err());
    }

    #[test]
    fn stationary_clearance_geometry() {
        let sc = DiffDriveScenario {
            obstacles: vec![Obstacle {
                q_x: 3.0,
                q_y: 4.0,
                r_obs: 0.5,
            }],
            ..Default::default()
        };
        let meta = TraceMeta {
            controller: ControllerKind::NominalRti,
            seed: 0,
            n_steps: 3,
            sample_time: 0.1,
            scenario: sc.clone(),
            gamma: None,
            final_state: vec![0.0; 5],
            margins: vec![],
            failure: None,
        };
        let x = Vector::zeros(5);
        let steps = (0..3)
            .map(|k| StepRecord {
                step: k,
                t: 0.1 * k as f64,
                clearance: sc.clearances(&x),
                x: x.clone(),
                u: Vector::zeros(2),
                margin: 0.0,
                violated_rows: 0,
                sqp_iterations: 1,
                timings: StepTimings {
                    total_ns: 10,
                    propagation_ns: 1,
                    ..Default::default()
                },
            })
            .collect();
        let m = metrics(&ClosedLoopTrace { meta, steps }).unwrap();
        assert!((m.min_clearance - (5.0 - sc.robot_radius - 0.5)).abs() < 1e-12);
        assert_eq!(m.collision_steps, 0);
        assert!((m.propagation_share_median - 0.1).abs() < 1e-12);
    }
}
