use std::sync::Arc;

use super::{BoxBound, ConstraintSet, LeastSquaresCost, OcpSpec, TighteningSets};
use crate::integrator::IntegratorConfig;
use crate::linalg::{Mat, Vector};
use crate::model::LtiModel;
use crate::Result;

/// Linear-quadratic tracking problem around the origin.
#[derive(Debug, Clone)]
pub struct LtiOcp {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
    pub q_terminal: Mat,
    pub n_intervals: usize,
    pub horizon: f64,
    pub x0: Vector,
    /// Symmetric bound `|u_i| <= u_max` on every control, if any.
    pub u_max: Option<f64>,
    /// Symmetric bound `|x_i| <= x_max` on every state at nodes 1..=N, if any.
    pub x_max: Option<f64>,
    pub integrator: Option<IntegratorConfig>,
}

pub fn build_lti_ocp(p: &LtiOcp) -> Result<OcpSpec> {
    let model = LtiModel::new(p.a.clone(), p.b.clone())?;
    let nx = p.a.nrows();
    let nu = p.b.ncols();
    let mut vx = Mat::zeros(nx + nu, nx);
    let mut vu = Mat::zeros(nx + nu, nu);
    vx.view_mut((0, 0), (nx, nx)).fill_with_identity();
    vu.view_mut((nx, 0), (nu, nu)).fill_with_identity();
    let mut weight = Mat::zeros(nx + nu, nx + nu);
    weight.view_mut((0, 0), (nx, nx)).copy_from(&p.q);
    weight.view_mut((nx, nx), (nu, nu)).copy_from(&p.r);

    let controls: Vec<BoxBound> = p
        .u_max
        .map(|m| (0..nu).map(|i| BoxBound::new(i, -m, m)).collect())
        .unwrap_or_default();
    let states: Vec<BoxBound> = p
        .x_max
        .map(|m| (0..nx).map(|i| BoxBound::new(i, -m, m)).collect())
        .unwrap_or_default();
    let dt = p.horizon / p.n_intervals as f64;
    let integrator = match &p.integrator {
        Some(cfg) => IntegratorConfig {
            step_size: dt,
            ..cfg.clone()
        },
        None => IntegratorConfig::erk4(dt),
    };
    let spec = OcpSpec {
        n_intervals: p.n_intervals,
        horizon: p.horizon,
        model: Arc::new(model),
        integrator,
        cost: LeastSquaresCost {
            vx,
            vu,
            weight,
            y_ref: vec![Vector::zeros(nx + nu); p.n_intervals],
            vx_e: Mat::identity(nx, nx),
            weight_e: p.q_terminal.clone(),
            y_ref_e: Vector::zeros(nx),
        },
        initial_constraints: ConstraintSet {
            control_bounds: controls.clone(),
            ..Default::default()
        },
        stage_constraints: ConstraintSet {
            state_bounds: states.clone(),
            control_bounds: controls,
            nonlinear: vec![],
        },
        terminal_constraints: ConstraintSet {
            state_bounds: states,
            ..Default::default()
        },
        tighten: TighteningSets::default(),
        x0: p.x0.clone(),
    };
    spec.validate()?;
    Ok(spec)
}
