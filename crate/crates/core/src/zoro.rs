//! Zero-order robust update: ellipsoidal uncertainty propagation along the
//! nominal trajectory, backoff computation and bound tightening between SQP
//! iterations, plus the zoRO-SQP and zoRO-RTI drivers.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::integrator::integrate;
use crate::linalg::{diag, dlqr, min_eigenvalue, symmetrize, Mat, Vector};
use crate::ocp::{OcpSpec, TighteningSets};
use crate::qp::{QpSolver, QpStatus};
use crate::sqp::{FeedbackResult, Iterate, IterationLog, SolveStatus, SqpSettings, SqpSolver};
use crate::{Error, Result};

/// Slack below zero tolerated in the backoff quadratic form before the
/// uncertainty matrix is declared indefinite.
const PSD_SLACK: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct ZoroConfig {
    pub p0_bar: Mat,
    /// Constant feedback gain, `nu x nx`.
    pub k: Mat,
    pub w: Mat,
    /// Noise sensitivity, `nx x nw`.
    pub g: Mat,
    pub gamma: f64,
    pub tighten: TighteningSets,
}

impl ZoroConfig {
    /// No uncertainty at all; the tightening sets are taken from `spec`.
    pub fn zero(spec: &OcpSpec) -> Self {
        let (nx, nu) = (spec.nx(), spec.nu());
        Self {
            p0_bar: Mat::zeros(nx, nx),
            k: Mat::zeros(nu, nx),
            w: Mat::zeros(nx, nx),
            g: Mat::identity(nx, nx),
            gamma: 1.0,
            tighten: spec.tighten.clone(),
        }
    }

    /// Diff-drive robust setting: `W = P0_bar = diag(2e-6, 2e-6, 4e-6,
    /// 1.5e-3, 7e-3)`, `gamma = 3`, and an LQR tube gain designed on the
    /// discretized model for straight driving at [`DIFF_DRIVE_LQR_SPEED`].
    /// Feeding back position and heading, not just the velocities, keeps the
    /// predicted collision tube narrow enough to stay recursively feasible.
    pub fn diff_drive(spec: &OcpSpec) -> Result<Self> {
        let w = diag(&[2e-6, 2e-6, 4e-6, 1.5e-3, 7e-3]);
        if spec.nx() != 5 || spec.nu() != 2 {
            return Err(Error::dim("diff-drive state", 5, spec.nx()));
        }
        let x_lin = Vector::from_column_slice(&[0.0, 0.0, 0.0, DIFF_DRIVE_LQR_SPEED, 0.0]);
        let step = integrate(spec.model.as_ref(), &x_lin, &Vector::zeros(2), &spec.integrator)?;
        let k = dlqr(&step.a, &step.b, &diag(&DIFF_DRIVE_LQR_Q), &diag(&DIFF_DRIVE_LQR_R))?;
        Ok(Self {
            p0_bar: w.clone(),
            k,
            w,
            g: Mat::identity(5, 5),
            gamma: 3.0,
            tighten: spec.tighten.clone(),
        })
    }

    pub fn nw(&self) -> usize {
        self.w.nrows()
    }

    /// Checks shapes against `spec`, symmetry and PSD-ness of `P0_bar`/`W`,
    /// `gamma >= 0`, and that every tightened row exists.
    pub fn validate(&self, spec: &OcpSpec) -> Result<()> {
        self.check_shapes(spec)?;
        for (name, m) in [("P0_bar", &self.p0_bar), ("W", &self.w)] {
            check_psd(name, m)?;
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("zoro.gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Dimension and index-set checks only; cheap enough for every update.
    pub fn check_shapes(&self, spec: &OcpSpec) -> Result<()> {
        let (nx, nu) = (spec.nx(), spec.nu());
        let shape = |name: &str, m: &Mat, r: usize, c: usize| -> Result<()> {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::Config(format!(
                    "zoro.{name} must be {r}x{c}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        shape("P0_bar", &self.p0_bar, nx, nx)?;
        shape("K", &self.k, nu, nx)?;
        shape("W", &self.w, self.w.nrows(), self.w.nrows())?;
        shape("G", &self.g, nx, self.nw())?;
        let n = spec.n_intervals;
        for k in [0, 1.min(n), n] {
            let rows = spec.constraints_at(k).n_rows();
            if let Some(&i) = self.tighten.at(k, n).iter().find(|&&i| i >= rows) {
                return Err(Error::Config(format!(
                    "zoro.tighten: row {i} at node {k} does not exist ({rows} rows)"
                )));
            }
        }
        Ok(())
    }
}

/// Forward speed [m/s] of the linearization behind the diff-drive tube gain.
pub const DIFF_DRIVE_LQR_SPEED: f64 = 0.5;
/// State weights `(p_x, p_y, theta, v, omega)` of the diff-drive tube gain.
pub const DIFF_DRIVE_LQR_Q: [f64; 5] = [10.0, 10.0, 1.0, 1.0, 1.0];
/// Control weights `(a, alpha)` of the diff-drive tube gain.
pub const DIFF_DRIVE_LQR_R: [f64; 2] = [1.0, 1.0];

fn check_psd(name: &str, m: &Mat) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!("zoro.{name} contains non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Config(format!("zoro.{name} is not symmetric")));
    }
    if m.nrows() > 0 && min_eigenvalue(m) < -1e-12 * scale {
        return Err(Error::Config(format!("zoro.{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Uncertainty matrices `P_0..P_N` and backoffs per node. Backoff vectors
/// have one entry per constraint row of the node; rows outside the
/// tightening set hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeState {
    pub p: Vec<Mat>,
    pub backoff: Vec<Vector>,
}

impl TubeState {
    pub fn is_zero(&self) -> bool {
        self.p.iter().all(|p| p.iter().all(|v| *v == 0.0)) && self.backoff.iter().all(|b| b.iter().all(|v| *v == 0.0))
    }
}

/// `P+ = (A + BK) P (A + BK)^T + G W G^T`, symmetrized.
pub fn propagate_uncertainty(a: &Mat, b: &Mat, k: &Mat, p: &Mat, g: &Mat, w: &Mat) -> Mat {
    let phi = a + b * k;
    let mut next = &phi * p * phi.transpose() + g * w * g.transpose();
    symmetrize(&mut next);
    next
}

/// `gamma * sqrt(v^T P v)` with `v = grad_x h + K^T grad_u h`.
pub fn compute_backoff(grad_h: &Vector, k: &Mat, p: &Mat, gamma: f64) -> Result<f64> {
    let nx = p.nrows();
    let nu = k.nrows();
    if grad_h.len() != nx + nu {
        return Err(Error::dim("constraint gradient", nx + nu, grad_h.len()));
    }
    let v = grad_h.rows(0, nx) + k.tr_mul(&grad_h.rows(nx, nu));
    let q = v.dot(&(p * &v));
    if q < -PSD_SLACK {
        return Err(Error::Numerical(format!(
            "uncertainty matrix is indefinite along a constraint normal (v^T P v = {q:e})"
        )));
    }
    Ok(gamma * q.max(0.0).sqrt())
}

/// Noise covariance used for the propagation step out of node `k`.
pub type NoiseOverride<'a> = dyn Fn(usize) -> Mat + 'a;

/// Propagates the tube along the solver's prepared linearization and
/// replaces the effective bounds of tightened rows by `nominal - beta`.
pub fn zoro_update(solver: &mut SqpSolver, cfg: &ZoroConfig) -> Result<TubeState> {
    zoro_update_with(solver, cfg, None)
}

/// As [`zoro_update`], with an optional per-node replacement for `W`.
pub fn zoro_update_with(solver: &mut SqpSolver, cfg: &ZoroConfig, w_of: Option<&NoiseOverride<'_>>) -> Result<TubeState> {
    cfg.check_shapes(solver.spec())?;
    let n = solver.spec().n_intervals;
    let ws = solver
        .workspace()
        .ok_or_else(|| Error::Config("zoro_update requires a prepared solver".into()))?;

    // the injected noise term is the same at every node unless overridden
    let gwg = &cfg.g * &cfg.w * cfg.g.transpose();
    let mut p = Vec::with_capacity(n + 1);
    p.push(cfg.p0_bar.clone());
    for k in 0..n {
        let node = &ws.nodes[k];
        let noise = match w_of {
            Some(f) => &cfg.g * f(k) * cfg.g.transpose(),
            None => gwg.clone(),
        };
        let phi = &node.a + &node.b * &cfg.k;
        let mut next = &phi * &p[k] * phi.transpose() + noise;
        symmetrize(&mut next);
        p.push(next);
    }

    let mut backoff = Vec::with_capacity(n + 1);
    for (k, node) in ws.nodes.iter().enumerate() {
        let mut beta = Vector::zeros(node.g.len());
        for &i in cfg.tighten.at(k, n) {
            let grad = node.grad.row(i).transpose();
            beta[i] = compute_backoff(&grad, &cfg.k, &p[k], cfg.gamma)?;
        }
        backoff.push(beta);
    }

    let bounds = solver.bounds_mut();
    for (k, beta) in backoff.iter().enumerate() {
        bounds.effective[k] = &bounds.nominal[k] - beta;
    }
    Ok(TubeState { p, backoff })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoroStatus {
    Converged,
    MaxIter,
    /// The tightened QP is infeasible while the nominal one is not.
    TightenedInfeasible,
    NominalInfeasible,
    QpFailed,
}

#[derive(Debug, Clone)]
pub struct ZoroOutcome {
    pub iterate: Iterate,
    pub tube: TubeState,
    pub status: ZoroStatus,
    pub iterations: usize,
    pub logs: Vec<IterationLog>,
    pub history: Vec<Iterate>,
    /// Total time spent in propagation and backoff computation.
    pub propagation_ns: u64,
}

/// zoRO-SQP from `guess` with `x0_bar = spec.x0`.
pub fn zoro_sqp(spec: &OcpSpec, cfg: &ZoroConfig, guess: Option<Iterate>, settings: &SqpSettings) -> Result<ZoroOutcome> {
    let mut solver = SqpSolver::new(spec.clone(), guess, *settings)?;
    let x0 = spec.x0.clone();
    zoro_solve(&mut solver, cfg, &x0)
}

/// Runs the solver's SQP loop with the robust update as bound hook.
pub fn zoro_solve(solver: &mut SqpSolver, cfg: &ZoroConfig, x0_bar: &Vector) -> Result<ZoroOutcome> {
    cfg.validate(solver.spec())?;
    let mut tube = None;
    let mut hook = |s: &mut SqpSolver| -> Result<()> {
        tube = Some(zoro_update(s, cfg)?);
        Ok(())
    };
    let report = solver.solve(x0_bar, Some(&mut hook))?;
    let tube = tube.expect("hook runs at least once");
    let status = match report.status {
        SolveStatus::Converged => ZoroStatus::Converged,
        SolveStatus::MaxIter => ZoroStatus::MaxIter,
        SolveStatus::QpFailed => ZoroStatus::QpFailed,
        SolveStatus::QpInfeasible => classify_infeasibility(solver, x0_bar)?,
    };
    let propagation_ns = report.logs.iter().map(|l| l.hook_ns).sum();
    Ok(ZoroOutcome {
        iterate: solver.iterate().clone(),
        tube,
        status,
        iterations: report.iterations,
        logs: report.logs,
        history: report.history,
        propagation_ns,
    })
}

/// Re-solves the current QP with nominal bounds to tell whether the
/// tightening caused the infeasibility.
fn classify_infeasibility(solver: &SqpSolver, x0_bar: &Vector) -> Result<ZoroStatus> {
    let mut nominal = solver.clone();
    nominal.bounds_mut().reset();
    let qp = nominal.condense(x0_bar)?;
    let sol = QpSolver::new(solver.settings().qp).solve(&qp, None)?;
    Ok(match sol.status {
        QpStatus::Optimal => ZoroStatus::TightenedInfeasible,
        _ => ZoroStatus::NominalInfeasible,
    })
}

/// Preparation phase of a zoRO real-time iteration: linearize at the
/// current (shifted) iterate, then propagate and tighten.
pub fn zoro_rti_prepare(solver: &mut SqpSolver, cfg: &ZoroConfig) -> Result<(TubeState, u64)> {
    solver.prepare()?;
    let t = Instant::now();
    let tube = zoro_update(solver, cfg)?;
    Ok((tube, t.elapsed().as_nanos() as u64))
}

/// Feedback phase of a zoRO real-time iteration.
pub fn zoro_rti_feedback(solver: &mut SqpSolver, x0_bar: &Vector) -> Result<FeedbackResult> {
    solver.feedback(x0_bar)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMethod {
    #[default]
    Normal,
    Chebyshev,
}

/// Backoff factor for a confidence level `p`.
pub fn gamma_from_probability(p: f64, method: GammaMethod) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok(match method {
        GammaMethod::Normal => Normal::standard().inverse_cdf(p),
        GammaMethod::Chebyshev => 1.0 / (1.0 - p).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_diff_drive_ocp, DiffDriveScenario};
    use approx::assert_abs_diff_eq;

    fn solver() -> SqpSolver {
        let spec = build_diff_drive_ocp(&DiffDriveScenario::default()).unwrap();
        let mut s = SqpSolver::new(spec, None, SqpSettings::default()).unwrap();
        s.prepare().unwrap();
        s
    }

    #[test]
    fn identity_dynamics_without_noise_keep_p() {
        let p = diag(&[1.0, 2.0, 3.0]);
        let out = propagate_uncertainty(
            &Mat::identity(3, 3),
            &Mat::zeros(3, 1),
            &Mat::zeros(1, 3),
            &p,
            &Mat::identity(3, 3),
            &Mat::zeros(3, 3),
        );
        assert_eq!(out, p);
    }

    #[test]
    fn zero_p_injects_w() {
        let w = diag(&[0.1, 0.2]);
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let b = Mat::from_row_slice(2, 1, &[1.0, -1.0]);
        let k = Mat::from_row_slice(1, 2, &[0.3, 0.7]);
        let out = propagate_uncertainty(&a, &b, &k, &Mat::zeros(2, 2), &Mat::identity(2, 2), &w);
        assert_eq!(out, w);
    }

    #[test]
    fn backoff_basic_cases() {
        let k = Mat::zeros(1, 2);
        let g = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(compute_backoff(&g, &k, &Mat::zeros(2, 2), 3.0).unwrap(), 0.0);
        assert_eq!(compute_backoff(&g, &k, &Mat::identity(2, 2), 1.0).unwrap(), 1.0);
        // control gradient is mapped through K
        let k = Mat::from_row_slice(1, 2, &[2.0, 0.0]);
        let gu = Vector::from_vec(vec![0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(compute_backoff(&gu, &k, &Mat::identity(2, 2), 1.0).unwrap(), 2.0);
    }

    #[test]
    fn backoff_rejects_indefinite_p() {
        let p = diag(&[-1e-3, 1.0]);
        let g = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(compute_backoff(&g, &Mat::zeros(1, 2), &p, 1.0).is_err());
        // tiny negative round-off is clamped
        let p = diag(&[-1e-15, 1.0]);
        assert_eq!(compute_backoff(&g, &Mat::zeros(1, 2), &p, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_uncertainty_leaves_bounds() {
        let mut s = solver();
        let cfg = ZoroConfig::zero(s.spec());
        let tube = zoro_update(&mut s, &cfg).unwrap();
        assert!(tube.is_zero());
        assert_eq!(s.bounds().effective, s.bounds().nominal);
    }

    #[test]
    fn terminal_bounds_not_tightened_and_update_idempotent() {
        let mut s = solver();
        let cfg = ZoroConfig::diff_drive(s.spec()).unwrap();
        let n = s.spec().n_intervals;
        let nominal_terminal = s.bounds().nominal[n].clone();
        zoro_update(&mut s, &cfg).unwrap();
        assert_eq!(s.bounds().effective[n], nominal_terminal);
        let once = s.bounds().clone();
        zoro_update(&mut s, &cfg).unwrap();
        assert_eq!(s.bounds(), &once);
        // only tightened rows differ from nominal
        for k in 1..n {
            for i in 0..once.nominal[k].len() {
                let moved = once.effective[k][i] != once.nominal[k][i];
                assert!(!moved || cfg.tighten.mid.contains(&i));
            }
        }
    }

    #[test]
    fn config_validation() {
        let s = solver();
        let mut cfg = ZoroConfig::diff_drive(s.spec()).unwrap();
        assert!(cfg.validate(s.spec()).is_ok());
        cfg.k = Mat::zeros(3, 5);
        assert!(cfg.validate(s.spec()).is_err());
        let mut cfg = ZoroConfig::diff_drive(s.spec()).unwrap();
        cfg.w[(0, 0)] = -1.0;
        assert!(cfg.validate(s.spec()).is_err());
        let mut cfg = ZoroConfig::diff_drive(s.spec()).unwrap();
        cfg.tighten.mid.insert(99);
        assert!(cfg.validate(s.spec()).is_err());
        let mut cfg = ZoroConfig::diff_drive(s.spec()).unwrap();
        cfg.gamma = -1.0;
        assert!(cfg.validate(s.spec()).is_err());
    }

    #[test]
    fn gamma_closed_forms() {
        assert_eq!(gamma_from_probability(0.5, GammaMethod::Normal).unwrap(), 0.0);
        assert_eq!(gamma_from_probability(0.75, GammaMethod::Chebyshev).unwrap(), 2.0);
        assert_abs_diff_eq!(gamma_from_probability(0.99865, GammaMethod::Normal).unwrap(), 3.0, epsilon = 1e-3);
        assert!(gamma_from_probability(1.0, GammaMethod::Normal).is_err());
        assert!(gamma_from_probability(0.0, GammaMethod::Chebyshev).is_err());
        assert!(gamma_from_probability(f64::NAN, GammaMethod::Normal).is_err());
    }
}
