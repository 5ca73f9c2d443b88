//! Obstacle-avoidance OCP for the differential-drive robot.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BoxBound, ConstraintSet, LeastSquaresCost, NonlinearRow, OcpSpec, RowKind, TighteningSets};
use crate::integrator::IntegratorConfig;
use crate::linalg::{diag, Mat, Vector};
use crate::model::DiffDriveModel;
use crate::{Error, Result};

const V: usize = DiffDriveModel::V;
const OMEGA: usize = DiffDriveModel::OMEGA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub q_x: f64,
    pub q_y: f64,
    pub r_obs: f64,
}

/// Box limits as `[lower, upper]`. Defaults are implementation choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffDriveBounds {
    pub v: [f64; 2],
    pub omega: [f64; 2],
    pub a: [f64; 2],
    pub alpha: [f64; 2],
    pub terminal_v: [f64; 2],
    pub terminal_omega: [f64; 2],
}

impl Default for DiffDriveBounds {
    fn default() -> Self {
        Self {
            v: [-0.5, 1.0],
            omega: [-1.0, 1.0],
            a: [-1.0, 1.0],
            alpha: [-4.0, 4.0],
            terminal_v: [-1e-3, 1e-3],
            terminal_omega: [-1e-3, 1e-3],
        }
    }
}

/// How the closed loop picks the start of each horizon's reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Wall-clock time: the reference keeps moving whatever the robot does.
    Clock,
    /// Projection of the current position onto the path, so a robot that
    /// detours around an obstacle is not pulled to catch up.
    Progress,
}

/// Piecewise-linear path through `waypoints` traversed at `speed` [m/s].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Reference {
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    pub mode: ReferenceMode,
}

impl Default for Reference {
    fn default() -> Self {
        Self {
            waypoints: vec![[0.0, 0.0], [8.0, 0.0]],
            speed: 0.5,
            mode: ReferenceMode::Progress,
        }
    }
}

/// Diagonal least-squares weights on `(p_x, p_y, theta, v, omega)` and
/// `(a, alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffDriveWeights {
    pub state: [f64; 5],
    pub control: [f64; 2],
    pub terminal: [f64; 5],
}

impl Default for DiffDriveWeights {
    fn default() -> Self {
        Self {
            state: [10.0, 10.0, 0.1, 0.5, 0.5],
            control: [1.0, 1.0],
            terminal: [10.0, 10.0, 0.1, 0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffDriveScenario {
    pub n_intervals: usize,
    pub horizon: f64,
    pub robot_radius: f64,
    pub obstacles: Vec<Obstacle>,
    pub bounds: DiffDriveBounds,
    pub reference: Reference,
    pub weights: DiffDriveWeights,
    pub x0: [f64; 5],
    pub newton_iters: usize,
}

impl Default for DiffDriveScenario {
    fn default() -> Self {
        Self {
            n_intervals: 20,
            horizon: 2.0,
            robot_radius: 0.15,
            obstacles: vec![
                Obstacle {
                    q_x: 1.5,
                    q_y: 0.25,
                    r_obs: 0.25,
                },
                Obstacle {
                    q_x: 2.8,
                    q_y: -0.25,
                    r_obs: 0.25,
                },
                Obstacle {
                    q_x: 4.0,
                    q_y: 0.25,
                    r_obs: 0.2,
                },
            ],
            bounds: DiffDriveBounds::default(),
            reference: Reference::default(),
            weights: DiffDriveWeights::default(),
            x0: [0.0; 5],
            newton_iters: 3,
        }
    }
}

impl DiffDriveScenario {
    /// Stage reference `(p_x, p_y, theta, v, omega, a, alpha)` at time `t`.
    pub fn reference_at(&self, t: f64) -> Vector {
        let wp = &self.reference.waypoints;
        let mut y = Vector::zeros(7);
        if wp.is_empty() {
            return y;
        }
        let mut remaining = (self.reference.speed * t).max(0.0);
        for seg in wp.windows(2) {
            let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
            let len = dx.hypot(dy);
            let heading = dy.atan2(dx);
            if remaining <= len && len > 0.0 {
                let s = remaining / len;
                y[0] = seg[0][0] + s * dx;
                y[1] = seg[0][1] + s * dy;
                y[2] = heading;
                y[3] = self.reference.speed;
                return y;
            }
            remaining -= len;
            y[2] = heading;
        }
        let last = wp[wp.len() - 1];
        y[0] = last[0];
        y[1] = last[1];
        y
    }

    /// Path time (arc length over speed) of the point on the path closest
    /// to the position of `x`.
    pub fn progress_time(&self, x: &Vector) -> f64 {
        let wp = &self.reference.waypoints;
        let (px, py) = (x[0], x[1]);
        let mut best = (f64::INFINITY, 0.0);
        let mut offset = 0.0;
        for seg in wp.windows(2) {
            let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
            let len2 = dx * dx + dy * dy;
            let s = if len2 > 0.0 {
                (((px - seg[0][0]) * dx + (py - seg[0][1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (px - seg[0][0] - s * dx).hypot(py - seg[0][1] - s * dy);
            if d < best.0 {
                best = (d, offset + s * len2.sqrt());
            }
            offset += len2.sqrt();
        }
        if self.reference.speed > 0.0 {
            best.1 / self.reference.speed
        } else {
            0.0
        }
    }

    /// Start time of the reference for a sample taken at time `t` in state
    /// `x`, according to the reference mode.
    pub fn reference_start(&self, t: f64, x: &Vector) -> f64 {
        match self.reference.mode {
            ReferenceMode::Clock => t,
            ReferenceMode::Progress => self.progress_time(x),
        }
    }

    /// Per-node references for a horizon starting at `t0`: `N` stage
    /// references and the terminal state reference.
    pub fn references_from(&self, t0: f64) -> (Vec<Vector>, Vector) {
        let dt = self.horizon / self.n_intervals as f64;
        let stage = (0..self.n_intervals).map(|k| self.reference_at(t0 + k as f64 * dt)).collect();
        let term = self.reference_at(t0 + self.horizon).rows(0, 5).into_owned();
        (stage, term)
    }

    pub fn r_total(&self, obs: &Obstacle) -> f64 {
        self.robot_radius + obs.r_obs
    }

    /// `||p - q|| - r - r_obs` for every obstacle.
    pub fn clearances(&self, x: &Vector) -> Vec<f64> {
        self.obstacles
            .iter()
            .map(|o| (x[0] - o.q_x).hypot(x[1] - o.q_y) - self.r_total(o))
            .collect()
    }
}

/// Builds the shooting OCP for `scenario`: `N` intervals with the
/// Gauss-Legendre integrator, box rows on `(v, omega)` and `(a, alpha)`,
/// one collision row per obstacle and tight terminal velocity bounds.
///
/// Tightened rows at intermediate nodes: lower and upper `v`, upper
/// `omega`, and every collision row. Nothing is tightened at the initial
/// or terminal node.
pub fn build_diff_drive_ocp(scenario: &DiffDriveScenario) -> Result<OcpSpec> {
    let b = &scenario.bounds;
    if scenario.n_intervals < 1 || !(scenario.horizon > 0.0) {
        return Err(Error::Scenario("horizon and interval count must be positive".into()));
    }
    let x0 = Vector::from_column_slice(&scenario.x0);
    for (i, o) in scenario.obstacles.iter().enumerate() {
        if !(o.r_obs >= 0.0) {
            return Err(Error::Scenario(format!("obstacle {i} has negative radius")));
        }
        let dist = (x0[0] - o.q_x).hypot(x0[1] - o.q_y);
        if dist <= scenario.r_total(o) {
            return Err(Error::Scenario(format!(
                "initial robot position overlaps obstacle {i} (distance {dist:.4} <= {:.4})",
                scenario.r_total(o)
            )));
        }
    }

    let control_bounds = vec![BoxBound::new(0, b.a[0], b.a[1]), BoxBound::new(1, b.alpha[0], b.alpha[1])];
    let initial_constraints = ConstraintSet {
        control_bounds: control_bounds.clone(),
        ..Default::default()
    };
    let stage_constraints = ConstraintSet {
        state_bounds: vec![BoxBound::new(V, b.v[0], b.v[1]), BoxBound::new(OMEGA, b.omega[0], b.omega[1])],
        control_bounds,
        nonlinear: scenario
            .obstacles
            .iter()
            .map(|o| NonlinearRow::Collision {
                px: DiffDriveModel::PX,
                py: DiffDriveModel::PY,
                qx: o.q_x,
                qy: o.q_y,
                r_total: scenario.r_total(o),
            })
            .collect(),
    };
    let terminal_constraints = ConstraintSet {
        state_bounds: vec![
            BoxBound::new(V, b.terminal_v[0], b.terminal_v[1]),
            BoxBound::new(OMEGA, b.terminal_omega[0], b.terminal_omega[1]),
        ],
        ..Default::default()
    };

    let mut mid: BTreeSet<usize> = [RowKind::StateUpper(V), RowKind::StateUpper(OMEGA), RowKind::StateLower(V)]
        .iter()
        .filter_map(|k| stage_constraints.row_index(*k))
        .collect();
    mid.extend((0..scenario.obstacles.len()).filter_map(|j| stage_constraints.row_index(RowKind::Nonlinear(j))));

    let w = &scenario.weights;
    let mut stage_w = w.state.to_vec();
    stage_w.extend_from_slice(&w.control);
    let mut vx = Mat::zeros(7, 5);
    let mut vu = Mat::zeros(7, 2);
    vx.view_mut((0, 0), (5, 5)).fill_with_identity();
    vu.view_mut((5, 0), (2, 2)).fill_with_identity();
    let (y_ref, y_ref_e) = scenario.references_from(scenario.reference_start(0.0, &Vector::from_column_slice(&scenario.x0)));
    let cost = LeastSquaresCost {
        vx,
        vu,
        weight: diag(&stage_w),
        y_ref,
        vx_e: Mat::identity(5, 5),
        weight_e: diag(&w.terminal),
        y_ref_e,
    };

    let dt = scenario.horizon / scenario.n_intervals as f64;
    let spec = OcpSpec {
        n_intervals: scenario.n_intervals,
        horizon: scenario.horizon,
        model: Arc::new(DiffDriveModel),
        integrator: IntegratorConfig::irk_gl4(dt, scenario.newton_iters),
        cost,
        initial_constraints,
        stage_constraints,
        terminal_constraints,
        tighten: TighteningSets {
            initial: BTreeSet::new(),
            mid,
            terminal: BTreeSet::new(),
        },
        x0,
    };
    spec.validate()?;
    Ok(spec)
}
