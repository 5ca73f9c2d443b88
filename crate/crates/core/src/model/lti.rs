use super::Model;
use crate::linalg::{Mat, Vector};
use crate::{Error, Result};

/// Linear time-invariant test model `xdot = A x + B u`.
#[derive(Debug, Clone)]
pub struct LtiModel {
    a: Mat,
    b: Mat,
}

impl LtiModel {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Config(format!(
                "lti: A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dim("lti B rows", a.nrows(), b.nrows()));
        }
        Ok(Self { a, b })
    }

    /// `f == 0` with the given dimensions.
    pub fn zero(nx: usize, nu: usize) -> Self {
        Self {
            a: Mat::zeros(nx, nx),
            b: Mat::zeros(nx, nu),
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }
}

impl Model for LtiModel {
    fn name(&self) -> &str {
        "lti"
    }

    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &Vector, _u: &Vector) -> (Mat, Mat) {
        (self.a.clone(), self.b.clone())
    }
}
