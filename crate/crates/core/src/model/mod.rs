//! Continuous-time dynamics `xdot = f(x, u)` with analytic Jacobians.

mod chain;
mod diff_drive;
mod lti;

use std::sync::Arc;

pub use chain::{ChainParams, HangingChainModel};
pub use diff_drive::DiffDriveModel;
pub use lti::LtiModel;

use crate::linalg::{Mat, Vector};
use crate::{Error, Result};

/// A continuous-time model. Implementations are immutable and shareable.
pub trait Model: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;

    /// State derivative. Callers guarantee dimensions.
    fn rhs(&self, x: &Vector, u: &Vector) -> Vector;

    /// `(df/dx, df/du)`.
    fn jacobians(&self, x: &Vector, u: &Vector) -> (Mat, Mat);
}

pub type SharedModel = Arc<dyn Model>;

fn check_dims(model: &dyn Model, x: &Vector, u: &Vector) -> Result<()> {
    if x.len() != model.nx() {
        return Err(Error::dim("state vector", model.nx(), x.len()));
    }
    if u.len() != model.nu() {
        return Err(Error::dim("control vector", model.nu(), u.len()));
    }
    Ok(())
}

pub fn eval_dynamics(model: &dyn Model, x: &Vector, u: &Vector) -> Result<Vector> {
    check_dims(model, x, u)?;
    Ok(model.rhs(x, u))
}

pub fn eval_jacobians(model: &dyn Model, x: &Vector, u: &Vector) -> Result<(Mat, Mat)> {
    check_dims(model, x, u)?;
    Ok(model.jacobians(x, u))
}

/// Parameters needed to instantiate a model from its registry name.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    pub n_mass: Option<usize>,
    pub chain: Option<ChainParams>,
    pub lti: Option<(Mat, Mat)>,
}

/// Looks up a model by name: `diff_drive`, `hanging_chain` or `lti`.
pub fn by_name(name: &str, params: &ModelParams) -> Result<SharedModel> {
    match name {
        "diff_drive" => Ok(Arc::new(DiffDriveModel)),
        "hanging_chain" => {
            let n_mass = params
                .n_mass
                .ok_or_else(|| Error::Config("hanging_chain requires n_mass".into()))?;
            let p = params.chain.unwrap_or_default();
            Ok(Arc::new(HangingChainModel::new(n_mass, p)?))
        }
        "lti" => {
            let (a, b) = params
                .lti
                .clone()
                .ok_or_else(|| Error::Config("lti model requires matrices a and b".into()))?;
            Ok(Arc::new(LtiModel::new(a, b)?))
        }
        other => Err(Error::Config(format!("unknown model '{other}'"))),
    }
}
