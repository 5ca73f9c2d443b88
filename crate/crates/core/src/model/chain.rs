use super::Model;
use crate::linalg::{Mat, Vector};
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Physical constants of the hanging chain.
///
/// The defaults are implementation choices for a smooth benchmark family,
/// not measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    /// Mass of each point [kg].
    pub mass: f64,
    /// Spring constant [N/m].
    pub spring: f64,
    /// Spring rest length [m].
    pub rest_length: f64,
    /// Gravitational acceleration along -z [m/s^2].
    pub gravity: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            mass: 0.033,
            spring: 33.0,
            rest_length: 0.033,
            gravity: 9.81,
        }
    }
}

/// Chain of `n_mass` point masses in 3D joined by linear springs.
///
/// Mass 0 is anchored at the origin and the last mass is the actuated end
/// whose velocity is the control. State layout:
/// `[p_1 .. p_F, v_1 .. v_F, p_end]` with `F = n_mass - 2` free masses,
/// so `n_x = 6 n_mass - 9` and `n_u = 3`.
#[derive(Debug, Clone)]
pub struct HangingChainModel {
    n_mass: usize,
    params: ChainParams,
}

impl HangingChainModel {
    pub fn new(n_mass: usize, params: ChainParams) -> Result<Self> {
        if n_mass < 3 {
            return Err(Error::Config(format!(
                "hanging_chain needs n_mass >= 3, got {n_mass}"
            )));
        }
        Ok(Self { n_mass, params })
    }

    pub fn n_mass(&self) -> usize {
        self.n_mass
    }

    pub fn n_free(&self) -> usize {
        self.n_mass - 2
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    /// Index of the first coordinate of the end mass position.
    pub fn end_offset(&self) -> usize {
        6 * self.n_free()
    }

    /// Masses evenly spaced on the segment from the anchor to `end`, at rest.
    pub fn line_state(&self, end: [f64; 3]) -> Vector {
        let nf = self.n_free();
        let mut x = Vector::zeros(6 * nf + 3);
        let segments = (self.n_mass - 1) as f64;
        for i in 0..nf {
            let s = (i + 1) as f64 / segments;
            for c in 0..3 {
                x[3 * i + c] = s * end[c];
            }
        }
        for c in 0..3 {
            x[6 * nf + c] = end[c];
        }
        x
    }

    /// A line configuration along +x of unit length with positions offset by
    /// `scale * noise`, used to sample points away from coincident masses.
    pub fn perturbed_line_state(nx: usize, noise: &Vector, scale: f64) -> Vector {
        let n_mass = (nx + 9) / 6;
        let model = Self::new(n_mass, ChainParams::default()).expect("valid chain size");
        let mut x = model.line_state([1.0, 0.0, 0.0]);
        x += noise * scale;
        x
    }

    fn position(&self, x: &Vector, i: usize) -> Vector3<f64> {
        // i in 0..n_mass: 0 = anchor, 1..=F free, n_mass-1 = end
        let nf = self.n_free();
        if i == 0 {
            Vector3::zeros()
        } else if i <= nf {
            Vector3::new(x[3 * (i - 1)], x[3 * (i - 1) + 1], x[3 * (i - 1) + 2])
        } else {
            let o = 6 * nf;
            Vector3::new(x[o], x[o + 1], x[o + 2])
        }
    }

    /// State column of the first coordinate of mass `i`, `None` for the anchor.
    fn position_col(&self, i: usize) -> Option<usize> {
        let nf = self.n_free();
        if i == 0 {
            None
        } else if i <= nf {
            Some(3 * (i - 1))
        } else {
            Some(6 * nf)
        }
    }

    /// Force on mass `i` from the spring to mass `i + 1`, and its Jacobian
    /// with respect to `d = p_{i+1} - p_i`.
    fn spring(&self, d: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let ChainParams {
            spring: k,
            rest_length: l,
            ..
        } = self.params;
        let r = d.norm();
        let force = d * (k * (1.0 - l / r));
        let jac = Matrix3::identity() * (k * (1.0 - l / r)) + d * d.transpose() * (k * l / (r * r * r));
        (force, jac)
    }
}

impl Model for HangingChainModel {
    fn name(&self) -> &str {
        "hanging_chain"
    }

    fn nx(&self) -> usize {
        6 * self.n_free() + 3
    }

    fn nu(&self) -> usize {
        3
    }

    fn rhs(&self, x: &Vector, u: &Vector) -> Vector {
        let nf = self.n_free();
        let m = self.params.mass;
        let mut f = Vector::zeros(self.nx());
        let forces: Vec<Vector3<f64>> = (0..self.n_mass - 1)
            .map(|i| self.spring(&(self.position(x, i + 1) - self.position(x, i))).0)
            .collect();
        for i in 1..=nf {
            let vo = 3 * nf + 3 * (i - 1);
            let acc = (forces[i] - forces[i - 1]) / m;
            for c in 0..3 {
                f[3 * (i - 1) + c] = x[vo + c];
                f[vo + c] = acc[c];
            }
            f[vo + 2] -= self.params.gravity;
        }
        for c in 0..3 {
            f[6 * nf + c] = u[c];
        }
        f
    }

    fn jacobians(&self, x: &Vector, _u: &Vector) -> (Mat, Mat) {
        let nf = self.n_free();
        let nx = self.nx();
        let m = self.params.mass;
        let mut dfdx = Mat::zeros(nx, nx);
        let mut dfdu = Mat::zeros(nx, 3);
        for i in 0..nf {
            for c in 0..3 {
                dfdx[(3 * i + c, 3 * nf + 3 * i + c)] = 1.0;
            }
        }
        // spring s joins mass s and s+1; it pushes +F on mass s, -F on mass s+1
        for s in 0..self.n_mass - 1 {
            let d = self.position(x, s + 1) - self.position(x, s);
            let (_, jac) = self.spring(&d);
            let jac = jac / m;
            // rows: accelerations of affected free masses
            let mut targets: Vec<(usize, f64)> = Vec::new();
            if (1..=nf).contains(&s) {
                targets.push((3 * nf + 3 * (s - 1), 1.0));
            }
            if (1..=nf).contains(&(s + 1)) {
                targets.push((3 * nf + 3 * s, -1.0));
            }
            for (row, sign) in targets {
                if let Some(col) = self.position_col(s + 1) {
                    for a in 0..3 {
                        for b in 0..3 {
                            dfdx[(row + a, col + b)] += sign * jac[(a, b)];
                        }
                    }
                }
                if let Some(col) = self.position_col(s) {
                    for a in 0..3 {
                        for b in 0..3 {
                            dfdx[(row + a, col + b)] -= sign * jac[(a, b)];
                        }
                    }
                }
            }
        }
        for c in 0..3 {
            dfdu[(6 * nf + c, c)] = 1.0;
        }
        (dfdx, dfdu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_dimension_is_affine_in_mass_count() {
        let dims: Vec<usize> = (3..8)
            .map(|n| HangingChainModel::new(n, ChainParams::default()).unwrap().nx())
            .collect();
        assert_eq!(dims, vec![9, 15, 21, 27, 33]);
        assert!(HangingChainModel::new(2, ChainParams::default()).is_err());
    }

    #[test]
    fn end_mass_follows_control() {
        let m = HangingChainModel::new(4, ChainParams::default()).unwrap();
        let x = m.line_state([1.0, 0.0, 0.0]);
        let u = Vector::from_column_slice(&[0.1, -0.2, 0.3]);
        let f = m.rhs(&x, &u);
        assert_eq!(&f.as_slice()[m.end_offset()..], &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn unstretched_vertical_chain_feels_only_gravity() {
        // springs at exactly rest length exert no force
        let p = ChainParams::default();
        let m = HangingChainModel::new(3, p).unwrap();
        let x = m.line_state([0.0, 0.0, -2.0 * p.rest_length]);
        let f = m.rhs(&x, &Vector::zeros(3));
        assert!((f[3] - 0.0).abs() < 1e-12 && (f[4] - 0.0).abs() < 1e-12);
        assert!((f[5] + p.gravity).abs() < 1e-10);
    }
}
