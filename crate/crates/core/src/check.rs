//! Independent feasibility verification of a robust solution.
//!
//! Given only the trajectories and the problem data, this recomputes the
//! dynamics sensitivities, the uncertainty matrices and the backoffs from
//! scratch and reports every row with `h + beta` above the tolerance. The
//! propagation and the quadratic forms are written as explicit index loops
//! so that they share no arithmetic with the solver path.

use serde::Serialize;

use crate::integrator::integrate;
use crate::linalg::Vector;
use crate::ocp::OcpSpec;
use crate::zoro::ZoroConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowViolation {
    pub node: usize,
    pub row: usize,
    pub h: f64,
    pub backoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub x0_error: f64,
    pub max_defect: f64,
    /// Largest `h + beta` over all rows (tightened or not).
    pub max_violation: f64,
    pub violations: Vec<RowViolation>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.x0_error <= self.tol && self.max_defect <= self.tol
    }
}

type Dense = Vec<Vec<f64>>;

fn to_dense(m: &crate::linalg::Mat) -> Dense {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, m, p) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i][k];
            for j in 0..p {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &Dense) -> Dense {
    let (n, m) = (a.len(), a.first().map_or(0, Vec::len));
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

/// Checks `x`, `u` against the dynamics, the initial state `spec.x0`, and
/// the robustly tightened constraints `h + beta <= tol` at every node.
pub fn check_feasibility(spec: &OcpSpec, cfg: &ZoroConfig, x: &[Vector], u: &[Vector], tol: f64) -> Result<CheckReport> {
    let n = spec.n_intervals;
    let (nx, nu) = (spec.nx(), spec.nu());
    if x.len() != n + 1 {
        return Err(Error::dim("state trajectory", n + 1, x.len()));
    }
    if u.len() != n {
        return Err(Error::dim("control trajectory", n, u.len()));
    }
    if let Some(v) = x.iter().find(|v| v.len() != nx) {
        return Err(Error::dim("state", nx, v.len()));
    }
    if let Some(v) = u.iter().find(|v| v.len() != nu) {
        return Err(Error::dim("control", nu, v.len()));
    }
    cfg.validate(spec)?;

    let x0_error = (&x[0] - &spec.x0).amax();
    let k_gain = to_dense(&cfg.k);
    let g = to_dense(&cfg.g);
    let gwg = matmul(&matmul(&g, &to_dense(&cfg.w)), &transpose(&g));
    let mut p = to_dense(&cfg.p0_bar);
    let mut max_defect = 0.0_f64;
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = Vec::new();

    for k in 0..=n {
        let uk = if k < n { u[k].clone() } else { Vector::zeros(nu) };
        let set = spec.constraints_at(k);
        let (vals, grads) = set.eval_functions(&x[k], &uk);
        let ub = set.upper_bounds();
        let tightened = cfg.tighten.at(k, n);
        for row in 0..vals.len() {
            let h = vals[row] - ub[row];
            let mut backoff = 0.0;
            if tightened.contains(&row) {
                // v = grad_x h + K^T grad_u h
                let v: Vec<f64> = (0..nx)
                    .map(|i| grads[(row, i)] + (0..nu).map(|j| k_gain[j][i] * grads[(row, nx + j)]).sum::<f64>())
                    .collect();
                let mut q = 0.0;
                for i in 0..nx {
                    for j in 0..nx {
                        q += v[i] * p[i][j] * v[j];
                    }
                }
                backoff = cfg.gamma * q.max(0.0).sqrt();
            }
            max_violation = max_violation.max(h + backoff);
            if h + backoff > tol {
                violations.push(RowViolation { node: k, row, h, backoff });
            }
        }
        if k == n {
            break;
        }
        let step = integrate(spec.model.as_ref(), &x[k], &uk, &spec.integrator)?;
        max_defect = max_defect.max((&step.x_next - &x[k + 1]).amax());
        // Phi = A + B K, P <- Phi P Phi^T + G W G^T
        let (a, b) = (to_dense(&step.a), to_dense(&step.b));
        let phi: Dense = (0..nx)
            .map(|i| (0..nx).map(|j| a[i][j] + (0..nu).map(|l| b[i][l] * k_gain[l][j]).sum::<f64>()).collect())
            .collect();
        let mut next = matmul(&matmul(&phi, &p), &transpose(&phi));
        for i in 0..nx {
            for j in 0..nx {
                next[i][j] += gwg[i][j];
            }
        }
        p = next;
    }

    Ok(CheckReport {
        x0_error,
        max_defect,
        max_violation,
        violations,
        tol,
    })
}
