//! Discrete-time maps `x+ = psi(x, u)` with sensitivities `A = dpsi/dx`,
//! `B = dpsi/du`.
//!
//! Two fixed-step schemes are provided: classical explicit RK4 with forward
//! sensitivities through the stages, and the two-stage Gauss-Legendre
//! implicit method (order four) solved by a fixed number of Newton
//! iterations, with sensitivities from the implicit function theorem.

use serde::{Deserialize, Serialize};

use crate::linalg::{is_finite, Mat, Vector};
use crate::model::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "ERK4")]
    Erk4,
    #[serde(rename = "IRK_GL4")]
    IrkGl4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Length of one call's integration interval [s], split into `num_steps`
    /// equal sub-steps.
    pub step_size: f64,
    /// Newton iterations per sub-step (IRK only).
    #[serde(default = "default_newton_iters")]
    pub newton_iters: usize,
    /// Factorize the stage Jacobian once per sub-step (IRK only).
    #[serde(default = "default_true")]
    pub jacobian_reuse: bool,
    #[serde(default = "default_num_steps")]
    pub num_steps: usize,
}

fn default_newton_iters() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_num_steps() -> usize {
    1
}

impl IntegratorConfig {
    pub fn erk4(step_size: f64) -> Self {
        Self {
            scheme: Scheme::Erk4,
            step_size,
            newton_iters: 3,
            jacobian_reuse: true,
            num_steps: 1,
        }
    }

    pub fn irk_gl4(step_size: f64, newton_iters: usize) -> Self {
        Self {
            scheme: Scheme::IrkGl4,
            step_size,
            newton_iters,
            jacobian_reuse: true,
            num_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "integrator step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.newton_iters < 1 {
            return Err(Error::Config("integrator newton_iters must be >= 1".into()));
        }
        if self.num_steps < 1 {
            return Err(Error::Config("integrator num_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStepResult {
    pub x_next: Vector,
    pub a: Mat,
    pub b: Mat,
    /// Max-norm of the IRK stage residual after the last Newton iteration.
    pub newton_residual: Option<f64>,
}

/// Integrates one interval with the scheme selected in `cfg`.
pub fn integrate(model: &dyn Model, x: &Vector, u: &Vector, cfg: &IntegratorConfig) -> Result<DiscreteStepResult> {
    match cfg.scheme {
        Scheme::Erk4 => erk4_step(model, x, u, cfg),
        Scheme::IrkGl4 => irk_gl4_step(model, x, u, cfg),
    }
}

fn check(model: &dyn Model, x: &Vector, u: &Vector, cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != model.nx() {
        return Err(Error::dim("integrator state", model.nx(), x.len()));
    }
    if u.len() != model.nu() {
        return Err(Error::dim("integrator control", model.nu(), u.len()));
    }
    Ok(())
}

fn non_finite(stage: usize, what: &str) -> Error {
    Error::Integration {
        node: None,
        stage,
        reason: format!("non-finite {what}"),
    }
}

/// Chains sub-step sensitivities: `A = A_s A`, `B = A_s B + B_s`.
fn compose(total: &mut Option<DiscreteStepResult>, step: DiscreteStepResult) {
    *total = Some(match total.take() {
        None => step,
        Some(prev) => DiscreteStepResult {
            b: &step.a * &prev.b + &step.b,
            a: &step.a * &prev.a,
            x_next: step.x_next,
            newton_residual: step.newton_residual,
        },
    });
}

pub fn erk4_step(model: &dyn Model, x: &Vector, u: &Vector, cfg: &IntegratorConfig) -> Result<DiscreteStepResult> {
    check(model, x, u, cfg)?;
    let h = cfg.step_size / cfg.num_steps as f64;
    let mut total = None;
    let mut xs = x.clone();
    for _ in 0..cfg.num_steps {
        let step = erk4_substep(model, &xs, u, h)?;
        xs = step.x_next.clone();
        compose(&mut total, step);
    }
    Ok(total.expect("num_steps >= 1"))
}

fn erk4_substep(model: &dyn Model, x: &Vector, u: &Vector, h: f64) -> Result<DiscreteStepResult> {
    let nx = model.nx();
    let eye = Mat::identity(nx, nx);
    let mut k_vals: Vec<Vector> = Vec::with_capacity(4);
    let mut k_dx: Vec<Mat> = Vec::with_capacity(4);
    let mut k_du: Vec<Mat> = Vec::with_capacity(4);
    let coeff = [0.0, 0.5, 0.5, 1.0];
    for (stage, c) in coeff.iter().enumerate() {
        let (xs, dxs_dx, dxs_du) = if stage == 0 {
            (x.clone(), eye.clone(), Mat::zeros(nx, model.nu()))
        } else {
            let ch = c * h;
            (
                x + &k_vals[stage - 1] * ch,
                &eye + &k_dx[stage - 1] * ch,
                &k_du[stage - 1] * ch,
            )
        };
        let k = model.rhs(&xs, u);
        if !is_finite(&k) {
            return Err(non_finite(stage + 1, "stage derivative"));
        }
        let (fx, fu) = model.jacobians(&xs, u);
        k_dx.push(&fx * dxs_dx);
        k_du.push(&fx * dxs_du + fu);
        k_vals.push(k);
    }
    let w = [1.0, 2.0, 2.0, 1.0];
    let mut x_next = x.clone();
    let mut a = eye;
    let mut b = Mat::zeros(nx, model.nu());
    for i in 0..4 {
        let s = h * w[i] / 6.0;
        x_next += &k_vals[i] * s;
        a += &k_dx[i] * s;
        b += &k_du[i] * s;
    }
    if !is_finite(&x_next) {
        return Err(non_finite(4, "state"));
    }
    Ok(DiscreteStepResult {
        x_next,
        a,
        b,
        newton_residual: None,
    })
}

/// Two-stage Gauss-Legendre Butcher matrix.
fn gl4_tableau() -> ([[f64; 2]; 2], [f64; 2]) {
    let r = 3.0_f64.sqrt() / 6.0;
    ([[0.25, 0.25 - r], [0.25 + r, 0.25]], [0.5, 0.5])
}

pub fn irk_gl4_step(model: &dyn Model, x: &Vector, u: &Vector, cfg: &IntegratorConfig) -> Result<DiscreteStepResult> {
    check(model, x, u, cfg)?;
    let h = cfg.step_size / cfg.num_steps as f64;
    let mut total = None;
    let mut xs = x.clone();
    for _ in 0..cfg.num_steps {
        let step = irk_substep(model, &xs, u, h, cfg.newton_iters, cfg.jacobian_reuse)?;
        xs = step.x_next.clone();
        compose(&mut total, step);
    }
    Ok(total.expect("num_steps >= 1"))
}

struct StageEval {
    residual: Vector,
    jac_x: [Mat; 2],
}

fn irk_substep(
    model: &dyn Model,
    x: &Vector,
    u: &Vector,
    h: f64,
    newton_iters: usize,
    reuse: bool,
) -> Result<DiscreteStepResult> {
    let nx = model.nx();
    let nu = model.nu();
    let (a_bt, b_bt) = gl4_tableau();

    let stage_states = |k: &Vector| -> [Vector; 2] {
        let k1 = k.rows(0, nx);
        let k2 = k.rows(nx, nx);
        [
            x + k1 * (h * a_bt[0][0]) + k2 * (h * a_bt[0][1]),
            x + k1 * (h * a_bt[1][0]) + k2 * (h * a_bt[1][1]),
        ]
    };
    let evaluate = |k: &Vector, with_jac: bool| -> StageEval {
        let xs = stage_states(k);
        let mut residual = k.clone();
        let mut jac_x = [Mat::zeros(0, 0), Mat::zeros(0, 0)];
        for i in 0..2 {
            let f = model.rhs(&xs[i], u);
            let mut r = residual.rows_mut(i * nx, nx);
            r -= &f;
            if with_jac {
                jac_x[i] = model.jacobians(&xs[i], u).0;
            }
        }
        StageEval { residual, jac_x }
    };
    let stage_jacobian = |jac_x: &[Mat; 2]| -> Mat {
        let mut j = Mat::identity(2 * nx, 2 * nx);
        for i in 0..2 {
            for l in 0..2 {
                let block = &jac_x[i] * (-h * a_bt[i][l]);
                let mut view = j.view_mut((i * nx, l * nx), (nx, nx));
                view += block;
            }
        }
        j
    };

    let f0 = model.rhs(x, u);
    if !is_finite(&f0) {
        return Err(non_finite(0, "initial stage guess"));
    }
    let mut k = Vector::zeros(2 * nx);
    k.rows_mut(0, nx).copy_from(&f0);
    k.rows_mut(nx, nx).copy_from(&f0);

    let mut lu = None;
    for it in 0..newton_iters {
        let need_jac = lu.is_none() || !reuse;
        let ev = evaluate(&k, need_jac);
        if !is_finite(&ev.residual) {
            return Err(Error::Integration {
                node: None,
                stage: it + 1,
                reason: "non-finite stage residual".into(),
            });
        }
        if need_jac {
            lu = Some(stage_jacobian(&ev.jac_x).lu());
        }
        let step = lu
            .as_ref()
            .expect("factorized above")
            .solve(&ev.residual)
            .ok_or_else(|| Error::Integration {
                node: None,
                stage: it + 1,
                reason: "singular stage Jacobian".into(),
            })?;
        k -= step;
    }

    // sensitivities from the implicit function theorem at the last iterate
    let ev = evaluate(&k, true);
    if !is_finite(&ev.residual) {
        return Err(Error::Integration {
            node: None,
            stage: newton_iters,
            reason: "non-finite stage residual".into(),
        });
    }
    let residual_norm = ev.residual.amax();
    let xs = stage_states(&k);
    let jac = stage_jacobian(&ev.jac_x).lu();
    let mut rhs_x = Mat::zeros(2 * nx, nx);
    let mut rhs_u = Mat::zeros(2 * nx, nu);
    for i in 0..2 {
        rhs_x.view_mut((i * nx, 0), (nx, nx)).copy_from(&ev.jac_x[i]);
        let fu = model.jacobians(&xs[i], u).1;
        rhs_u.view_mut((i * nx, 0), (nx, nu)).copy_from(&fu);
    }
    let singular = || Error::Integration {
        node: None,
        stage: newton_iters,
        reason: "singular stage Jacobian in sensitivity solve".into(),
    };
    let dk_dx = jac.solve(&rhs_x).ok_or_else(singular)?;
    let dk_du = jac.solve(&rhs_u).ok_or_else(singular)?;

    let mut x_next = x.clone();
    let mut a = Mat::identity(nx, nx);
    let mut b = Mat::zeros(nx, nu);
    for i in 0..2 {
        let w = h * b_bt[i];
        x_next += k.rows(i * nx, nx) * w;
        a += dk_dx.rows(i * nx, nx) * w;
        b += dk_du.rows(i * nx, nx) * w;
    }
    if !is_finite(&x_next) {
        return Err(non_finite(2, "state"));
    }
    Ok(DiscreteStepResult {
        x_next,
        a,
        b,
        newton_residual: Some(residual_norm),
    })
}
