//! Multiple-shooting OCP container: dimensions, least-squares cost,
//! one-sided inequality rows and the index sets of rows to tighten.

mod chain;
mod diff_drive;
mod lti;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use chain::{build_chain_ocp, ChainOcpOptions};
pub use diff_drive::{build_diff_drive_ocp, DiffDriveBounds, DiffDriveScenario, DiffDriveWeights, Obstacle, Reference, ReferenceMode};
pub use lti::{build_lti_ocp, LtiOcp};

use crate::integrator::IntegratorConfig;
use crate::linalg::{Mat, Vector};
use crate::model::SharedModel;
use crate::{Error, Result};

/// Two-sided bound on one state or control component. Either side may be
/// absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBound {
    pub index: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl BoxBound {
    pub fn new(index: usize, lower: f64, upper: f64) -> Self {
        Self {
            index,
            lower: Some(lower),
            upper: Some(upper),
        }
    }
}

/// Nonlinear inequality row `g(x, u) <= ub`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NonlinearRow {
    /// `||(x[px], x[py]) - (qx, qy)|| >= r_total`, stored as
    /// `-||p - q|| <= -r_total`.
    Collision {
        px: usize,
        py: usize,
        qx: f64,
        qy: f64,
        r_total: f64,
    },
    /// `gx' x + gu' u <= upper`.
    Affine { gx: Vec<f64>, gu: Vec<f64>, upper: f64 },
}

/// Below this distance the collision row gradient is undefined and is set to
/// zero.
pub const COLLISION_SINGULAR_DIST: f64 = 1e-9;

impl NonlinearRow {
    fn eval(&self, x: &Vector, u: &Vector, grad: &mut [f64]) -> f64 {
        let nx = x.len();
        match self {
            NonlinearRow::Collision { px, py, qx, qy, .. } => {
                let dx = x[*px] - qx;
                let dy = x[*py] - qy;
                let dist = dx.hypot(dy);
                if dist >= COLLISION_SINGULAR_DIST {
                    grad[*px] = -dx / dist;
                    grad[*py] = -dy / dist;
                }
                -dist
            }
            NonlinearRow::Affine { gx, gu, .. } => {
                grad[..nx].copy_from_slice(gx);
                grad[nx..].copy_from_slice(gu);
                gx.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
                    + gu.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    fn upper(&self) -> f64 {
        match self {
            NonlinearRow::Collision { r_total, .. } => -r_total,
            NonlinearRow::Affine { upper, .. } => *upper,
        }
    }

    fn uses_control(&self) -> bool {
        match self {
            NonlinearRow::Collision { .. } => false,
            NonlinearRow::Affine { gu, .. } => gu.iter().any(|v| *v != 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowKind {
    StateLower(usize),
    StateUpper(usize),
    ControlLower(usize),
    ControlUpper(usize),
    Nonlinear(usize),
}

/// Inequality rows of one shooting node, normalized to `g(x, u) - ub <= 0`.
///
/// Row order: state bounds, control bounds, nonlinear rows; each two-sided
/// bound contributes its lower row before its upper row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub state_bounds: Vec<BoxBound>,
    pub control_bounds: Vec<BoxBound>,
    pub nonlinear: Vec<NonlinearRow>,
}

impl ConstraintSet {
    pub fn rows(&self) -> Vec<RowKind> {
        let mut rows = Vec::new();
        for b in &self.state_bounds {
            if b.lower.is_some() {
                rows.push(RowKind::StateLower(b.index));
            }
            if b.upper.is_some() {
                rows.push(RowKind::StateUpper(b.index));
            }
        }
        for b in &self.control_bounds {
            if b.lower.is_some() {
                rows.push(RowKind::ControlLower(b.index));
            }
            if b.upper.is_some() {
                rows.push(RowKind::ControlUpper(b.index));
            }
        }
        rows.extend((0..self.nonlinear.len()).map(RowKind::Nonlinear));
        rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows().len()
    }

    pub fn row_index(&self, kind: RowKind) -> Option<usize> {
        self.rows().iter().position(|r| *r == kind)
    }

    pub fn has_control_rows(&self) -> bool {
        !self.control_bounds.is_empty() || self.nonlinear.iter().any(NonlinearRow::uses_control)
    }

    /// Splits every two-sided bound into one-sided entries. The row list and
    /// row order are unchanged; applying it twice is the same as once.
    pub fn normalized(&self) -> ConstraintSet {
        let split = |bounds: &[BoxBound]| -> Vec<BoxBound> {
            let mut out = Vec::new();
            for b in bounds {
                if let Some(l) = b.lower {
                    out.push(BoxBound {
                        index: b.index,
                        lower: Some(l),
                        upper: None,
                    });
                }
                if let Some(u) = b.upper {
                    out.push(BoxBound {
                        index: b.index,
                        lower: None,
                        upper: Some(u),
                    });
                }
            }
            out
        };
        ConstraintSet {
            state_bounds: split(&self.state_bounds),
            control_bounds: split(&self.control_bounds),
            nonlinear: self.nonlinear.clone(),
        }
    }

    /// Nominal right-hand sides `ub` of the rows.
    pub fn upper_bounds(&self) -> Vector {
        let mut ub = Vec::new();
        for b in self.state_bounds.iter().chain(&self.control_bounds) {
            if let Some(l) = b.lower {
                ub.push(-l);
            }
            if let Some(u) = b.upper {
                ub.push(u);
            }
        }
        ub.extend(self.nonlinear.iter().map(NonlinearRow::upper));
        Vector::from_vec(ub)
    }

    /// Row functions `g(x, u)` (without bounds) and their gradients with
    /// respect to `(x, u)`, one gradient per row of width `nx + nu`.
    pub fn eval_functions(&self, x: &Vector, u: &Vector) -> (Vector, Mat) {
        let nx = x.len();
        let nu = u.len();
        let rows = self.n_rows();
        let mut vals = Vector::zeros(rows);
        let mut grads = Mat::zeros(rows, nx + nu);
        let mut r = 0;
        for (bounds, offset, src) in [(&self.state_bounds, 0, x), (&self.control_bounds, nx, u)] {
            for b in bounds.iter() {
                if b.lower.is_some() {
                    vals[r] = -src[b.index];
                    grads[(r, offset + b.index)] = -1.0;
                    r += 1;
                }
                if b.upper.is_some() {
                    vals[r] = src[b.index];
                    grads[(r, offset + b.index)] = 1.0;
                    r += 1;
                }
            }
        }
        let mut buf = vec![0.0; nx + nu];
        for row in &self.nonlinear {
            buf.iter_mut().for_each(|v| *v = 0.0);
            vals[r] = row.eval(x, u, &mut buf);
            for (j, g) in buf.iter().enumerate() {
                grads[(r, j)] = *g;
            }
            r += 1;
        }
        (vals, grads)
    }

    fn validate(&self, nx: usize, nu: usize, what: &str) -> Result<()> {
        for b in &self.state_bounds {
            if b.index >= nx {
                return Err(Error::Config(format!("{what}: state bound index {} >= nx {nx}", b.index)));
            }
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l > u {
                    return Err(Error::Config(format!("{what}: lower {l} > upper {u} on state {}", b.index)));
                }
            }
        }
        for b in &self.control_bounds {
            if b.index >= nu {
                return Err(Error::Config(format!("{what}: control bound index {} >= nu {nu}", b.index)));
            }
        }
        for row in &self.nonlinear {
            match row {
                NonlinearRow::Collision { px, py, .. } if *px >= nx || *py >= nx => {
                    return Err(Error::Config(format!("{what}: collision row indexes outside the state")));
                }
                NonlinearRow::Affine { gx, gu, .. } if gx.len() != nx || gu.len() != nu => {
                    return Err(Error::Config(format!("{what}: affine row has wrong width")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Linear least-squares cost `0.5 ||Vx x + Vu u - y_ref_k||^2_W` per stage and
/// `0.5 ||Vx_e x - y_ref_e||^2_{W_e}` at the terminal node.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresCost {
    pub vx: Mat,
    pub vu: Mat,
    pub weight: Mat,
    pub y_ref: Vec<Vector>,
    pub vx_e: Mat,
    pub weight_e: Mat,
    pub y_ref_e: Vector,
}

impl LeastSquaresCost {
    /// Gauss-Newton Hessian, gradient and value of a stage term. `vu` is
    /// ignored when `u` is empty.
    pub fn stage_terms(&self, x: &Vector, u: &Vector, y_ref: &Vector) -> (Mat, Vector, f64) {
        let nu = u.len();
        let nx = x.len();
        let mut jac = Mat::zeros(self.vx.nrows(), nx + nu);
        jac.view_mut((0, 0), (self.vx.nrows(), nx)).copy_from(&self.vx);
        jac.view_mut((0, nx), (self.vu.nrows(), nu)).copy_from(&self.vu);
        let resid = &self.vx * x + &self.vu * u - y_ref;
        let wr = &self.weight * &resid;
        let hess = jac.tr_mul(&(&self.weight * &jac));
        let grad = jac.tr_mul(&wr);
        (hess, grad, 0.5 * resid.dot(&wr))
    }

    pub fn terminal_terms(&self, x: &Vector, y_ref: &Vector) -> (Mat, Vector, f64) {
        let resid = &self.vx_e * x - y_ref;
        let wr = &self.weight_e * &resid;
        let hess = self.vx_e.tr_mul(&(&self.weight_e * &self.vx_e));
        (hess, self.vx_e.tr_mul(&wr), 0.5 * resid.dot(&wr))
    }

    fn validate(&self, nx: usize, nu: usize, n: usize) -> Result<()> {
        let ny = self.vx.nrows();
        if self.vx.ncols() != nx || self.vu.ncols() != nu || self.vu.nrows() != ny {
            return Err(Error::Config("cost: output maps do not match model dimensions".into()));
        }
        if self.weight.shape() != (ny, ny) || self.y_ref.len() != n || self.y_ref.iter().any(|r| r.len() != ny) {
            return Err(Error::Config("cost: stage weight/reference shape mismatch".into()));
        }
        let ny_e = self.vx_e.nrows();
        if self.vx_e.ncols() != nx || self.weight_e.shape() != (ny_e, ny_e) || self.y_ref_e.len() != ny_e {
            return Err(Error::Config("cost: terminal shape mismatch".into()));
        }
        for w in [&self.weight, &self.weight_e] {
            if (w - w.transpose()).amax() > 1e-12 || crate::linalg::min_eigenvalue(w) < -1e-12 {
                return Err(Error::Config("cost: weights must be symmetric PSD".into()));
            }
        }
        Ok(())
    }
}

/// Rows that receive a backoff, for the initial, intermediate and terminal
/// nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TighteningSets {
    #[serde(default)]
    pub initial: BTreeSet<usize>,
    #[serde(default)]
    pub mid: BTreeSet<usize>,
    #[serde(default)]
    pub terminal: BTreeSet<usize>,
}

impl TighteningSets {
    pub fn at(&self, k: usize, n: usize) -> &BTreeSet<usize> {
        if k == 0 {
            &self.initial
        } else if k == n {
            &self.terminal
        } else {
            &self.mid
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub n_intervals: usize,
    /// Horizon length [s].
    pub horizon: f64,
    pub model: SharedModel,
    pub integrator: IntegratorConfig,
    pub cost: LeastSquaresCost,
    /// Rows at node 0. The initial state is fixed there, so this set usually
    /// holds control rows only.
    pub initial_constraints: ConstraintSet,
    pub stage_constraints: ConstraintSet,
    pub terminal_constraints: ConstraintSet,
    pub tighten: TighteningSets,
    /// Nominal initial state used to build the first guess.
    pub x0: Vector,
}

impl OcpSpec {
    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nu(&self) -> usize {
        self.model.nu()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_intervals as f64
    }

    pub fn constraints_at(&self, k: usize) -> &ConstraintSet {
        if k == 0 {
            &self.initial_constraints
        } else if k == self.n_intervals {
            &self.terminal_constraints
        } else {
            &self.stage_constraints
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.n_intervals);
        if n < 1 {
            return Err(Error::Config("OCP needs at least one shooting interval".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("OCP horizon must be positive".into()));
        }
        self.integrator.validate()?;
        if (self.integrator.step_size - self.dt()).abs() > 1e-12 * self.dt().max(1.0) {
            return Err(Error::Config(format!(
                "integrator step_size {} does not match T/N = {}",
                self.integrator.step_size,
                self.dt()
            )));
        }
        if self.x0.len() != nx {
            return Err(Error::dim("OCP x0", nx, self.x0.len()));
        }
        self.cost.validate(nx, nu, n)?;
        self.initial_constraints.validate(nx, nu, "initial constraints")?;
        self.stage_constraints.validate(nx, nu, "stage constraints")?;
        self.terminal_constraints.validate(nx, nu, "terminal constraints")?;
        if self.terminal_constraints.has_control_rows() {
            return Err(Error::Config("terminal constraints must not depend on controls".into()));
        }
        for (set, cons, what) in [
            (&self.tighten.initial, &self.initial_constraints, "initial"),
            (&self.tighten.mid, &self.stage_constraints, "mid"),
            (&self.tighten.terminal, &self.terminal_constraints, "terminal"),
        ] {
            if let Some(bad) = set.iter().find(|&&i| i >= cons.n_rows()) {
                return Err(Error::Config(format!(
                    "tightening index {bad} in {what} set exceeds {} constraint rows",
                    cons.n_rows()
                )));
            }
        }
        Ok(())
    }
}

/// Nominal constraint values `h = g - ub` and gradients at node `k`.
/// `u` is ignored at the terminal node; gradients always have `nx + nu`
/// columns.
pub fn eval_constraints(spec: &OcpSpec, k: usize, x: &Vector, u: &Vector) -> Result<(Vector, Mat)> {
    if k > spec.n_intervals {
        return Err(Error::Config(format!("node {k} beyond horizon {}", spec.n_intervals)));
    }
    if x.len() != spec.nx() {
        return Err(Error::dim("constraint state", spec.nx(), x.len()));
    }
    let zero_u;
    let u = if k == spec.n_intervals {
        zero_u = Vector::zeros(spec.nu());
        &zero_u
    } else {
        if u.len() != spec.nu() {
            return Err(Error::dim("constraint control", spec.nu(), u.len()));
        }
        u
    };
    let cons = spec.constraints_at(k);
    let (g, grads) = cons.eval_functions(x, u);
    Ok((g - cons.upper_bounds(), grads))
}
