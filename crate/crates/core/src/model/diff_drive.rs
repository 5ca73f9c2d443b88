use super::Model;
use crate::linalg::{Mat, Vector};

/// Differential-drive robot.
///
/// State `(p_x, p_y, theta, v, omega)`, control `(a, alpha)`:
/// `xdot = (v cos theta, v sin theta, omega, a, alpha)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiffDriveModel;

impl DiffDriveModel {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const THETA: usize = 2;
    pub const V: usize = 3;
    pub const OMEGA: usize = 4;
    pub const A: usize = 0;
    pub const ALPHA: usize = 1;
}

impl Model for DiffDriveModel {
    fn name(&self) -> &str {
        "diff_drive"
    }

    fn nx(&self) -> usize {
        5
    }

    fn nu(&self) -> usize {
        2
    }

    fn rhs(&self, x: &Vector, u: &Vector) -> Vector {
        let (theta, v, omega) = (x[2], x[3], x[4]);
        Vector::from_column_slice(&[v * theta.cos(), v * theta.sin(), omega, u[0], u[1]])
    }

    fn jacobians(&self, x: &Vector, _u: &Vector) -> (Mat, Mat) {
        let (theta, v) = (x[2], x[3]);
        let mut dfdx = Mat::zeros(5, 5);
        dfdx[(0, 2)] = -v * theta.sin();
        dfdx[(0, 3)] = theta.cos();
        dfdx[(1, 2)] = v * theta.cos();
        dfdx[(1, 3)] = theta.sin();
        dfdx[(2, 4)] = 1.0;
        let mut dfdu = Mat::zeros(5, 2);
        dfdu[(3, 0)] = 1.0;
        dfdu[(4, 1)] = 1.0;
        (dfdx, dfdu)
    }
}
