//! Gauss-Newton SQP over the nominal OCP with full condensing and a
//! preparation/feedback split (real-time iteration).
//!
//! `prepare` performs every evaluation that does not depend on the measured
//! initial state: integration with sensitivities, constraint functions and
//! gradients, cost linearization, and the condensing of Hessian, gradient
//! and constraint matrices. `feedback` only subtracts the current bounds,
//! adds the contribution of `x0_bar - x_0`, solves the dense QP and applies
//! the full step. Bounds may be changed between the two phases, which is how
//! the robust update tightens constraints.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::integrator::integrate;
use crate::linalg::{inf_norm, is_finite, Mat, Vector};
use crate::ocp::OcpSpec;
use crate::qp::{DenseQp, QpSettings, QpSolver, QpStatus};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub tol_stationarity: f64,
    pub tol_equality: f64,
    pub tol_inequality: f64,
    pub tol_complementarity: f64,
    /// Added to the diagonal of the condensed Hessian.
    pub levenberg: f64,
    pub qp: QpSettings,
    /// Keep a copy of every iterate in the solve report.
    pub record_history: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol_stationarity: 1e-6,
            tol_equality: 1e-8,
            tol_inequality: 1e-8,
            tol_complementarity: 1e-6,
            levenberg: 0.0,
            qp: QpSettings::default(),
            record_history: false,
        }
    }
}

impl SqpSettings {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            self.tol_stationarity,
            self.tol_equality,
            self.tol_inequality,
            self.tol_complementarity,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("SQP tolerances must be positive".into()));
        }
        if self.levenberg < 0.0 {
            return Err(Error::Config("levenberg regularization must be >= 0".into()));
        }
        Ok(())
    }
}

/// Primal trajectories and the inequality multipliers of the last QP.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub lam: Vec<Vector>,
}

impl Iterate {
    /// All states at `x0`, all controls zero.
    pub fn constant(spec: &OcpSpec, x0: &Vector) -> Self {
        let n = spec.n_intervals;
        Self {
            x: vec![x0.clone(); n + 1],
            u: vec![Vector::zeros(spec.nu()); n],
            lam: (0..=n).map(|k| Vector::zeros(spec.constraints_at(k).n_rows())).collect(),
        }
    }

    pub fn validate(&self, spec: &OcpSpec) -> Result<()> {
        let n = spec.n_intervals;
        if self.x.len() != n + 1 {
            return Err(Error::dim("iterate state nodes", n + 1, self.x.len()));
        }
        if self.u.len() != n {
            return Err(Error::dim("iterate control nodes", n, self.u.len()));
        }
        if let Some(x) = self.x.iter().find(|x| x.len() != spec.nx()) {
            return Err(Error::dim("iterate state", spec.nx(), x.len()));
        }
        if let Some(u) = self.u.iter().find(|u| u.len() != spec.nu()) {
            return Err(Error::dim("iterate control", spec.nu(), u.len()));
        }
        if !self.x.iter().chain(&self.u).all(is_finite) {
            return Err(Error::Numerical("iterate contains non-finite values".into()));
        }
        Ok(())
    }

    /// Shift by one node, duplicating the last state and control.
    pub fn shift(&mut self) {
        let n = self.u.len();
        for k in 0..n {
            self.x[k] = self.x[k + 1].clone();
        }
        for k in 0..n.saturating_sub(1) {
            self.u[k] = self.u[k + 1].clone();
        }
        for l in &mut self.lam {
            l.fill(0.0);
        }
    }
}

/// Linearization of one shooting node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLinearization {
    /// Dynamics sensitivities (empty at the terminal node).
    pub a: Mat,
    pub b: Mat,
    pub x_next: Vector,
    pub newton_residual: Option<f64>,
    /// Constraint row functions `g` (bounds not subtracted) and gradients.
    pub g: Vector,
    pub grad: Mat,
    /// Gauss-Newton Hessian, gradient and value of the cost term.
    pub hess: Mat,
    pub cost_grad: Vector,
    pub cost: f64,
}

/// Condensed QP data that does not depend on `x0_bar` or the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub h: Mat,
    pub g_const: Vector,
    pub g_x0: Mat,
    pub c: Mat,
    pub d_const: Vector,
    pub d_x0: Mat,
    pub row_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub nodes: Vec<NodeLinearization>,
    pub condensed: Condensed,
}

impl Workspace {
    /// Dynamics defects `psi(x_k, u_k) - x_{k+1}`.
    pub fn defects<'a>(&'a self, it: &'a Iterate) -> impl Iterator<Item = Vector> + 'a {
        self.nodes
            .iter()
            .zip(it.x.iter().skip(1))
            .map(|(n, x)| &n.x_next - x)
    }

    pub fn total_cost(&self) -> f64 {
        self.nodes.iter().map(|n| n.cost).sum()
    }
}

/// Nominal and effective (possibly tightened) right-hand sides per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub nominal: Vec<Vector>,
    pub effective: Vec<Vector>,
}

impl Bounds {
    pub fn from_spec(spec: &OcpSpec) -> Self {
        let nominal: Vec<Vector> = (0..=spec.n_intervals)
            .map(|k| spec.constraints_at(k).upper_bounds())
            .collect();
        Self {
            effective: nominal.clone(),
            nominal,
        }
    }

    pub fn reset(&mut self) {
        self.effective.clone_from(&self.nominal);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseTimings {
    pub prepare_ns: u64,
    pub condense_ns: u64,
    pub feedback_ns: u64,
    pub qp_ns: u64,
}

/// KKT residuals of the NLP at the current iterate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub equality: f64,
    pub inequality: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackResult {
    pub u0: Vector,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub qp_kkt: f64,
    /// Max-norm of the full primal step.
    pub step_norm: f64,
    pub applied: bool,
}

/// Sparse stage-wise QP data, exposed for verification.
#[derive(Debug, Clone)]
pub struct StageQp {
    pub hess: Vec<Mat>,
    pub grad: Vec<Vector>,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub defects: Vec<Vector>,
    pub cons_grad: Vec<Mat>,
    /// `g - ub_effective` at the linearization point.
    pub cons_val: Vec<Vector>,
    pub dx0: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    QpInfeasible,
    QpFailed,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub qp_status: String,
    pub qp_iterations: usize,
    pub qp_kkt: f64,
    pub step_norm: f64,
    pub residuals: KktReport,
    pub cost: f64,
    pub timings: PhaseTimings,
    pub hook_ns: u64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub logs: Vec<IterationLog>,
    /// Iterates after every applied step (only with `record_history`).
    pub history: Vec<Iterate>,
}

/// Callback run after every `prepare` and before the next `feedback`.
pub type BoundHook<'a> = dyn FnMut(&mut SqpSolver) -> Result<()> + 'a;

/// One control loop's solver state.
#[derive(Debug, Clone)]
pub struct SqpSolver {
    spec: OcpSpec,
    settings: SqpSettings,
    iterate: Iterate,
    workspace: Option<Workspace>,
    bounds: Bounds,
    y_ref: Vec<Vector>,
    y_ref_e: Vector,
    qp: QpSolver,
    timings: PhaseTimings,
}

fn elapsed_ns(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

impl SqpSolver {
    pub fn new(spec: OcpSpec, guess: Option<Iterate>, settings: SqpSettings) -> Result<Self> {
        spec.validate()?;
        settings.validate()?;
        let iterate = match guess {
            Some(g) => {
                g.validate(&spec)?;
                g
            }
            None => Iterate::constant(&spec, &spec.x0),
        };
        Ok(Self {
            bounds: Bounds::from_spec(&spec),
            y_ref: spec.cost.y_ref.clone(),
            y_ref_e: spec.cost.y_ref_e.clone(),
            qp: QpSolver::new(settings.qp),
            spec,
            settings,
            iterate,
            workspace: None,
            timings: PhaseTimings::default(),
        })
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn settings(&self) -> &SqpSettings {
        &self.settings
    }

    pub fn iterate(&self) -> &Iterate {
        &self.iterate
    }

    /// Replacing the iterate invalidates the prepared workspace.
    pub fn set_iterate(&mut self, it: Iterate) -> Result<()> {
        it.validate(&self.spec)?;
        self.iterate = it;
        self.workspace = None;
        Ok(())
    }

    pub fn workspace(&self) -> Option<&Workspace> {
        self.workspace.as_ref()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn bounds_mut(&mut self) -> &mut Bounds {
        &mut self.bounds
    }

    pub fn timings(&self) -> PhaseTimings {
        self.timings
    }

    /// Replaces the tracking references; takes effect at the next `prepare`.
    pub fn set_reference(&mut self, stage: Vec<Vector>, terminal: Vector) -> Result<()> {
        if stage.len() != self.spec.n_intervals {
            return Err(Error::dim("stage references", self.spec.n_intervals, stage.len()));
        }
        let ny = self.spec.cost.vx.nrows();
        if let Some(r) = stage.iter().find(|r| r.len() != ny) {
            return Err(Error::dim("stage reference", ny, r.len()));
        }
        if terminal.len() != self.spec.cost.vx_e.nrows() {
            return Err(Error::dim("terminal reference", self.spec.cost.vx_e.nrows(), terminal.len()));
        }
        self.y_ref = stage;
        self.y_ref_e = terminal;
        self.workspace = None;
        Ok(())
    }

    pub fn shift(&mut self) {
        self.iterate.shift();
        self.workspace = None;
    }

    /// Preparation phase: linearize at the current iterate and condense.
    pub fn prepare(&mut self) -> Result<()> {
        let t0 = Instant::now();
        self.iterate.validate(&self.spec)?;
        let nodes = linearize(&self.spec, &self.iterate, &self.y_ref, &self.y_ref_e)?;
        let t1 = Instant::now();
        let condensed = condense_prepared(&self.spec, &self.iterate, &nodes, self.settings.levenberg);
        self.timings.condense_ns = elapsed_ns(t1);
        self.workspace = Some(Workspace { nodes, condensed });
        self.timings.prepare_ns = elapsed_ns(t0);
        Ok(())
    }

    fn prepared(&self) -> Result<&Workspace> {
        self.workspace
            .as_ref()
            .ok_or_else(|| Error::Config("feedback called before prepare".into()))
    }

    /// The complete dense QP at `x0_bar` and the current effective bounds.
    pub fn condense(&self, x0_bar: &Vector) -> Result<DenseQp> {
        let ws = self.prepared()?;
        assemble(&self.spec, &self.iterate, ws, &self.bounds, x0_bar)
    }

    /// Feedback phase: solve the condensed QP for `x0_bar` and apply the
    /// full step. The step is not applied if the QP is not solved.
    pub fn feedback(&mut self, x0_bar: &Vector) -> Result<FeedbackResult> {
        let t0 = Instant::now();
        let qp = self.condense(x0_bar)?;
        let tq = Instant::now();
        let sol = self.qp.solve(&qp, None)?;
        self.timings.qp_ns = elapsed_ns(tq);
        let ws = self.workspace.as_ref().expect("checked in condense");
        let result = apply_step(&self.spec, &mut self.iterate, ws, x0_bar, &sol);
        if result.applied {
            // the linearization no longer matches the iterate
            self.workspace = None;
        }
        self.timings.feedback_ns = elapsed_ns(t0);
        Ok(result)
    }

    /// Sparse stage-wise form of the current QP.
    pub fn stage_qp(&self, x0_bar: &Vector) -> Result<StageQp> {
        let ws = self.prepared()?;
        let n = self.spec.n_intervals;
        Ok(StageQp {
            hess: ws.nodes.iter().map(|l| l.hess.clone()).collect(),
            grad: ws.nodes.iter().map(|l| l.cost_grad.clone()).collect(),
            a: ws.nodes[..n].iter().map(|l| l.a.clone()).collect(),
            b: ws.nodes[..n].iter().map(|l| l.b.clone()).collect(),
            defects: ws.defects(&self.iterate).collect(),
            cons_grad: ws.nodes.iter().map(|l| l.grad.clone()).collect(),
            cons_val: ws
                .nodes
                .iter()
                .zip(&self.bounds.effective)
                .map(|(l, ub)| &l.g - ub)
                .collect(),
            dx0: x0_bar - &self.iterate.x[0],
        })
    }

    /// NLP residuals at the current (prepared) iterate with its stored
    /// multipliers.
    pub fn residuals(&self, x0_bar: &Vector) -> Result<KktReport> {
        let ws = self.prepared()?;
        let qp = assemble(&self.spec, &self.iterate, ws, &self.bounds, x0_bar)?;
        let lam = stack(&self.iterate.lam);
        let stat = &qp.g + qp.c.tr_mul(&lam);
        let mut equality = inf_norm(&(x0_bar - &self.iterate.x[0]));
        for d in ws.defects(&self.iterate) {
            equality = equality.max(inf_norm(&d));
        }
        let mut inequality = 0.0_f64;
        let mut complementarity = 0.0_f64;
        for (k, node) in ws.nodes.iter().enumerate() {
            let h = &node.g - &self.bounds.effective[k];
            for (hi, li) in h.iter().zip(self.iterate.lam[k].iter()) {
                inequality = inequality.max(*hi);
                complementarity = complementarity.max((hi * li).abs());
            }
        }
        Ok(KktReport {
            stationarity: inf_norm(&stat),
            equality,
            inequality,
            complementarity,
        })
    }

    fn converged(&self, r: &KktReport) -> bool {
        let s = &self.settings;
        r.stationarity <= s.tol_stationarity
            && r.equality <= s.tol_equality
            && r.inequality <= s.tol_inequality
            && r.complementarity <= s.tol_complementarity
    }

    /// Full SQP: iterate prepare, hook, feedback until the KKT tolerances
    /// hold at the new iterate or `max_iter` QPs have been solved. On return
    /// the workspace is prepared at the final iterate and the hook has run
    /// on it.
    pub fn solve(&mut self, x0_bar: &Vector, mut hook: Option<&mut BoundHook<'_>>) -> Result<SolveReport> {
        let mut logs = Vec::new();
        let mut history = Vec::new();
        self.prepare()?;
        let mut hook_ns = run_hook(self, &mut hook)?;
        for it in 1..=self.settings.max_iter {
            let prep = self.timings;
            let fb = self.feedback(x0_bar)?;
            let mut log = IterationLog {
                iteration: it,
                qp_status: format!("{:?}", fb.qp_status),
                qp_iterations: fb.qp_iterations,
                qp_kkt: fb.qp_kkt,
                step_norm: fb.step_norm,
                residuals: KktReport::default(),
                cost: 0.0,
                timings: PhaseTimings {
                    prepare_ns: prep.prepare_ns,
                    condense_ns: prep.condense_ns,
                    feedback_ns: self.timings.feedback_ns,
                    qp_ns: self.timings.qp_ns,
                },
                hook_ns,
            };
            if !fb.applied {
                logs.push(log);
                let status = match fb.qp_status {
                    QpStatus::Infeasible => SolveStatus::QpInfeasible,
                    _ => SolveStatus::QpFailed,
                };
                // restore a prepared workspace for the caller
                self.prepare()?;
                run_hook(self, &mut hook)?;
                return Ok(SolveReport {
                    status,
                    iterations: it,
                    logs,
                    history,
                });
            }
            if self.settings.record_history {
                history.push(self.iterate.clone());
            }
            self.prepare()?;
            hook_ns = run_hook(self, &mut hook)?;
            let res = self.residuals(x0_bar)?;
            log.residuals = res;
            log.cost = self.workspace.as_ref().map_or(0.0, Workspace::total_cost);
            logs.push(log);
            if self.converged(&res) {
                return Ok(SolveReport {
                    status: SolveStatus::Converged,
                    iterations: it,
                    logs,
                    history,
                });
            }
        }
        Ok(SolveReport {
            status: SolveStatus::MaxIter,
            iterations: self.settings.max_iter,
            logs,
            history,
        })
    }
}

fn run_hook(solver: &mut SqpSolver, hook: &mut Option<&mut BoundHook<'_>>) -> Result<u64> {
    match hook {
        Some(h) => {
            let t = Instant::now();
            h(solver)?;
            Ok(elapsed_ns(t))
        }
        None => Ok(0),
    }
}

/// Runs a full SQP from `guess` (or the constant trajectory at `spec.x0`)
/// with `x0_bar = spec.x0`.
pub fn sqp_solve(
    spec: &OcpSpec,
    guess: Option<Iterate>,
    settings: &SqpSettings,
    hook: Option<&mut BoundHook<'_>>,
) -> Result<(Iterate, SolveReport)> {
    let mut solver = SqpSolver::new(spec.clone(), guess, *settings)?;
    let x0 = spec.x0.clone();
    let report = solver.solve(&x0, hook)?;
    Ok((solver.iterate, report))
}

/// One SQP iteration as a single call with no phase boundary: linearize,
/// condense, assemble for `x0_bar`, solve and apply.
pub fn sqp_iteration(
    spec: &OcpSpec,
    iterate: &Iterate,
    x0_bar: &Vector,
    bounds: &Bounds,
    settings: &SqpSettings,
) -> Result<(Iterate, FeedbackResult)> {
    iterate.validate(spec)?;
    let nodes = linearize(spec, iterate, &spec.cost.y_ref, &spec.cost.y_ref_e)?;
    let ws = Workspace {
        condensed: condense_prepared(spec, iterate, &nodes, settings.levenberg),
        nodes,
    };
    let qp = assemble(spec, iterate, &ws, bounds, x0_bar)?;
    let sol = QpSolver::new(settings.qp).solve(&qp, None)?;
    let mut next = iterate.clone();
    let res = apply_step(spec, &mut next, &ws, x0_bar, &sol);
    Ok((next, res))
}

fn linearize(spec: &OcpSpec, it: &Iterate, y_ref: &[Vector], y_ref_e: &Vector) -> Result<Vec<NodeLinearization>> {
    let n = spec.n_intervals;
    let model = spec.model.as_ref();
    let mut nodes = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let x = &it.x[k];
        let (a, b, x_next, newton_residual, hess, cost_grad, cost, u) = if k < n {
            let u = &it.u[k];
            let step = integrate(model, x, u, &spec.integrator).map_err(|e| e.at_node(k))?;
            let (hess, grad, cost) = spec.cost.stage_terms(x, u, &y_ref[k]);
            (step.a, step.b, step.x_next, step.newton_residual, hess, grad, cost, u.clone())
        } else {
            let (hess, grad, cost) = spec.cost.terminal_terms(x, y_ref_e);
            let e = Mat::zeros(0, 0);
            (e.clone(), e, Vector::zeros(0), None, hess, grad, cost, Vector::zeros(spec.nu()))
        };
        let (g, grad) = spec.constraints_at(k).eval_functions(x, &u);
        nodes.push(NodeLinearization {
            a,
            b,
            x_next,
            newton_residual,
            g,
            grad,
            hess,
            cost_grad,
            cost,
        });
    }
    Ok(nodes)
}

/// Eliminates the states: `dx_k = T_k dx0 + Gamma_k du + e_k`.
fn condense_prepared(spec: &OcpSpec, it: &Iterate, nodes: &[NodeLinearization], levenberg: f64) -> Condensed {
    let n = spec.n_intervals;
    let (nx, nu) = (spec.nx(), spec.nu());
    let nv = n * nu;
    let m: usize = nodes.iter().map(|l| l.g.len()).sum();

    let mut h = Mat::zeros(nv, nv);
    let mut g_const = Vector::zeros(nv);
    let mut g_x0 = Mat::zeros(nv, nx);
    let mut c = Mat::zeros(m, nv);
    let mut d_const = Vector::zeros(m);
    let mut d_x0 = Mat::zeros(m, nx);
    let mut row_offsets = Vec::with_capacity(n + 2);

    let mut gamma = Mat::zeros(nx, nv);
    let mut t = Mat::identity(nx, nx);
    let mut e = Vector::zeros(nx);
    let mut row = 0;
    for (k, node) in nodes.iter().enumerate() {
        // only the first w columns of Gamma_k / Z_k can be nonzero
        let w = if k < n { (k + 1) * nu } else { nv };
        let nz = if k < n { nx + nu } else { nx };
        let mut z = Mat::zeros(nz, w);
        z.view_mut((0, 0), (nx, w)).copy_from(&gamma.columns(0, w));
        let mut tz = Mat::zeros(nz, nx);
        tz.view_mut((0, 0), (nx, nx)).copy_from(&t);
        let mut ez = Vector::zeros(nz);
        ez.rows_mut(0, nx).copy_from(&e);
        if k < n {
            z.view_mut((nx, k * nu), (nu, nu)).fill_with_identity();
        }

        let hz = &node.hess * &z;
        let mut hb = h.view_mut((0, 0), (w, w));
        hb += z.tr_mul(&hz);
        let lin = &node.hess * &ez + &node.cost_grad;
        let mut gb = g_const.rows_mut(0, w);
        gb += z.tr_mul(&lin);
        let mut gx = g_x0.view_mut((0, 0), (w, nx));
        gx += hz.tr_mul(&tz);

        row_offsets.push(row);
        let r = node.g.len();
        if r > 0 {
            let grad = node.grad.columns(0, nz);
            c.view_mut((row, 0), (r, w)).copy_from(&(&grad * &z));
            d_const.rows_mut(row, r).copy_from(&(&node.g + &grad * &ez));
            d_x0.view_mut((row, 0), (r, nx)).copy_from(&(&grad * &tz));
        }
        row += r;

        if k < n {
            let defect = &node.x_next - &it.x[k + 1];
            gamma = &node.a * &gamma;
            gamma.view_mut((0, k * nu), (nx, nu)).copy_from(&node.b);
            t = &node.a * &t;
            e = &node.a * &e + defect;
        }
    }
    row_offsets.push(row);
    crate::linalg::symmetrize(&mut h);
    for i in 0..nv {
        h[(i, i)] += levenberg;
    }
    Condensed {
        h,
        g_const,
        g_x0,
        c,
        d_const,
        d_x0,
        row_offsets,
    }
}

fn stack(parts: &[Vector]) -> Vector {
    let len = parts.iter().map(Vector::len).sum();
    let mut out = Vector::zeros(len);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(p);
        r += p.len();
    }
    out
}

fn assemble(spec: &OcpSpec, it: &Iterate, ws: &Workspace, bounds: &Bounds, x0_bar: &Vector) -> Result<DenseQp> {
    if x0_bar.len() != spec.nx() {
        return Err(Error::dim("x0_bar", spec.nx(), x0_bar.len()));
    }
    let cd = &ws.condensed;
    let dx0 = x0_bar - &it.x[0];
    let ub = stack(&bounds.effective);
    if ub.len() != cd.d_const.len() {
        return Err(Error::dim("bound vector", cd.d_const.len(), ub.len()));
    }
    Ok(DenseQp {
        h: cd.h.clone(),
        g: &cd.g_const + &cd.g_x0 * &dx0,
        c: cd.c.clone(),
        d: &cd.d_const + &cd.d_x0 * &dx0 - ub,
    })
}

fn apply_step(
    spec: &OcpSpec,
    it: &mut Iterate,
    ws: &Workspace,
    x0_bar: &Vector,
    sol: &crate::qp::QpSolution,
) -> FeedbackResult {
    let nu = spec.nu();
    let n = spec.n_intervals;
    let fail = |u0: Vector| FeedbackResult {
        u0,
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        qp_kkt: sol.kkt_residual,
        step_norm: 0.0,
        applied: false,
    };
    if sol.status != QpStatus::Optimal || !is_finite(&sol.z) {
        return fail(it.u[0].clone());
    }
    let mut dx = x0_bar - &it.x[0];
    let mut step_norm = inf_norm(&dx);
    let mut new_x = Vec::with_capacity(n + 1);
    let mut new_u = Vec::with_capacity(n);
    for k in 0..n {
        let du = sol.z.rows(k * nu, nu).into_owned();
        step_norm = step_norm.max(inf_norm(&du));
        new_x.push(&it.x[k] + &dx);
        new_u.push(&it.u[k] + &du);
        let node = &ws.nodes[k];
        dx = &node.a * &dx + &node.b * &du + (&node.x_next - &it.x[k + 1]);
        step_norm = step_norm.max(inf_norm(&dx));
    }
    new_x.push(&it.x[n] + &dx);
    it.x = new_x;
    it.u = new_u;
    for (k, lam) in it.lam.iter_mut().enumerate() {
        let (r0, r1) = (ws.condensed.row_offsets[k], ws.condensed.row_offsets[k + 1]);
        *lam = sol.lambda.rows(r0, r1 - r0).into_owned();
    }
    FeedbackResult {
        u0: it.u[0].clone(),
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        qp_kkt: sol.kkt_residual,
        step_norm,
        applied: true,
    }
}
