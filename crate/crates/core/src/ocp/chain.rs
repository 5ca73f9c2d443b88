use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BoxBound, ConstraintSet, LeastSquaresCost, OcpSpec, TighteningSets};
use crate::integrator::IntegratorConfig;
use crate::linalg::{Mat, Vector};
use crate::model::{ChainParams, HangingChainModel, Model};
use crate::Result;

/// Hanging-chain problem used for the propagation-cost scaling study: move
/// the end mass from a start to a target configuration while every free
/// mass stays above a floor `z >= z_floor` (tightened).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainOcpOptions {
    pub n_intervals: usize,
    pub horizon: f64,
    pub start_end: [f64; 3],
    pub target_end: [f64; 3],
    pub z_floor: f64,
    pub u_max: f64,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub control_weight: f64,
}

impl Default for ChainOcpOptions {
    fn default() -> Self {
        Self {
            n_intervals: 20,
            horizon: 2.0,
            start_end: [0.9, 0.3, 0.0],
            target_end: [1.0, 0.0, 0.0],
            z_floor: -0.2,
            u_max: 1.0,
            position_weight: 10.0,
            velocity_weight: 0.1,
            control_weight: 0.1,
        }
    }
}

pub fn build_chain_ocp(n_mass: usize, params: ChainParams, opts: &ChainOcpOptions) -> Result<OcpSpec> {
    let model = HangingChainModel::new(n_mass, params)?;
    let nx = model.nx();
    let nu = model.nu();
    let nf = model.n_free();

    let mut state_w = vec![opts.position_weight; nx];
    for w in state_w.iter_mut().skip(3 * nf).take(3 * nf) {
        *w = opts.velocity_weight;
    }
    let mut weight = Mat::zeros(nx + nu, nx + nu);
    for (i, w) in state_w.iter().enumerate() {
        weight[(i, i)] = *w;
    }
    for i in 0..nu {
        weight[(nx + i, nx + i)] = opts.control_weight;
    }
    let mut vx = Mat::zeros(nx + nu, nx);
    let mut vu = Mat::zeros(nx + nu, nu);
    vx.view_mut((0, 0), (nx, nx)).fill_with_identity();
    vu.view_mut((nx, 0), (nu, nu)).fill_with_identity();
    let target = model.line_state(opts.target_end);
    let mut y_ref = Vector::zeros(nx + nu);
    y_ref.rows_mut(0, nx).copy_from(&target);

    let floors: Vec<BoxBound> = (0..nf)
        .map(|i| BoxBound {
            index: 3 * i + 2,
            lower: Some(opts.z_floor),
            upper: None,
        })
        .collect();
    let controls: Vec<BoxBound> = (0..nu).map(|i| BoxBound::new(i, -opts.u_max, opts.u_max)).collect();
    let floor_rows: BTreeSet<usize> = (0..nf).collect();
    let dt = opts.horizon / opts.n_intervals as f64;
    let spec = OcpSpec {
        n_intervals: opts.n_intervals,
        horizon: opts.horizon,
        x0: model.line_state(opts.start_end),
        model: Arc::new(model),
        integrator: IntegratorConfig::irk_gl4(dt, 3),
        cost: LeastSquaresCost {
            vx,
            vu,
            weight,
            y_ref: vec![y_ref; opts.n_intervals],
            vx_e: Mat::identity(nx, nx),
            weight_e: Mat::from_diagonal(&Vector::from_vec(state_w)),
            y_ref_e: target,
        },
        initial_constraints: ConstraintSet {
            control_bounds: controls.clone(),
            ..Default::default()
        },
        stage_constraints: ConstraintSet {
            state_bounds: floors.clone(),
            control_bounds: controls,
            nonlinear: vec![],
        },
        terminal_constraints: ConstraintSet {
            state_bounds: floors,
            ..Default::default()
        },
        tighten: TighteningSets {
            initial: BTreeSet::new(),
            mid: floor_rows.clone(),
            terminal: floor_rows,
        },
    };
    spec.validate()?;
    Ok(spec)
}
