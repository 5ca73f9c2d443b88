//! Dense convex QP solver for the condensed subproblems.
//!
//! Solves `min 0.5 z'Hz + g'z  s.t.  Cz + d <= 0` with a primal-dual
//! interior-point method using Mehrotra's predictor-corrector. Each
//! iteration factorizes the reduced system `H + reg I + C' (L/S) C` once
//! and reuses the factor for both the affine and the corrector direction.
//! Residuals are always measured against the unregularized `H`, so the
//! regularization only perturbs the Newton direction, not the solution.

use serde::{Deserialize, Serialize};

use crate::linalg::{inf_norm, Mat, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: Mat,
    pub g: Vector,
    pub c: Mat,
    pub d: Vector,
}

impl DenseQp {
    pub fn unconstrained(h: Mat, g: Vector) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            c: Mat::zeros(0, n),
            d: Vector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::dim("QP Hessian", n, self.h.nrows()));
        }
        if self.c.ncols() != n {
            return Err(Error::dim("QP constraint columns", n, self.c.ncols()));
        }
        if self.c.nrows() != self.m() {
            return Err(Error::dim("QP constraint rows", self.m(), self.c.nrows()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vector,
    pub lambda: Vector,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub reg: f64,
    /// Residual level below which an active-set polish is attempted.
    pub polish_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            reg: 1e-8,
            polish_tol: 1e-6,
        }
    }
}

/// KKT residuals of a primal-dual pair: stationarity, primal infeasibility,
/// complementarity and dual infeasibility, each in the max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

pub fn kkt_residuals(qp: &DenseQp, z: &Vector, lambda: &Vector) -> KktResiduals {
    let stat = &qp.h * z + &qp.g + qp.c.tr_mul(lambda);
    let cons = &qp.c * z + &qp.d;
    KktResiduals {
        stationarity: inf_norm(&stat),
        primal: cons.iter().fold(0.0_f64, |m, &v| m.max(v)),
        complementarity: cons
            .iter()
            .zip(lambda.iter())
            .fold(0.0_f64, |m, (c, l)| m.max((c * l).abs())),
        dual: lambda.iter().fold(0.0_f64, |m, &l| m.max(-l)),
    }
}

/// Interior-point solver; one instance handles one solve at a time.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
}

/// Convenience wrapper with default settings.
pub fn solve_qp(qp: &DenseQp, warm_start: Option<&Vector>) -> Result<QpSolution> {
    QpSolver::default().solve(qp, warm_start)
}

/// Largest `alpha <= 1` keeping `v + alpha dv >= 0`.
fn max_step(v: &Vector, dv: &Vector) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .fold(1.0_f64, |a, (&x, &d)| a.min(-x / d))
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn solve(&mut self, qp: &DenseQp, warm_start: Option<&Vector>) -> Result<QpSolution> {
        qp.validate()?;
        let n = qp.n();
        let m = qp.m();
        let tol = self.settings.tol;
        let mut z = match warm_start {
            Some(w) if w.len() == n => w.clone(),
            Some(w) => return Err(Error::dim("QP warm start", n, w.len())),
            None => Vector::zeros(n),
        };
        let mut s = (&qp.c * &z + &qp.d).map(|r| (-r).max(1.0));
        let mut lam = Vector::from_element(m, 1.0);

        let mut iterations = 0;
        let mut status = QpStatus::MaxIter;
        while iterations <= self.settings.max_iter {
            let res = kkt_residuals(qp, &z, &lam);
            if m > 0 && res.max() <= self.settings.polish_tol {
                if let Some((zp, lp)) = polish(qp, &z, &lam, &s) {
                    let polished = kkt_residuals(qp, &zp, &lp).max();
                    if polished <= tol && polished <= res.max() {
                        z = zp;
                        lam = lp;
                        status = QpStatus::Optimal;
                        break;
                    }
                }
            }
            if res.max() <= tol {
                status = QpStatus::Optimal;
                break;
            }
            if m > 0 && self.infeasibility_certificate(qp, &lam) {
                status = QpStatus::Infeasible;
                break;
            }
            if iterations == self.settings.max_iter {
                break;
            }
            iterations += 1;

            let r_d = &qp.h * &z + &qp.g + qp.c.tr_mul(&lam);
            let r_p = &qp.c * &z + &qp.d + &s;
            // cap the barrier weights so nearly-active rows cannot overflow
            let w = lam.component_div(&s).map(|v| v.min(1e20));
            let Some((kkt, chol)) = self.factorize(qp, &w) else {
                // ill-conditioned beyond regularization: report what we have
                break;
            };

            if m == 0 {
                z -= refined_solve(&kkt, &chol, &r_d);
                continue;
            }

            let mu = s.dot(&lam) / m as f64;
            // affine (predictor) direction
            let r_c = s.component_mul(&lam);
            let (_, ds_a, dl_a) = direction(qp, &kkt, &chol, &r_d, &r_p, &r_c, &s, &lam);
            let alpha_a = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
            let mu_aff = (&s + &ds_a * alpha_a).dot(&(&lam + &dl_a * alpha_a)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // combined (corrector) direction
            let r_c = &r_c + ds_a.component_mul(&dl_a) - Vector::from_element(m, sigma * mu);
            let (dz, ds, dl) = direction(qp, &kkt, &chol, &r_d, &r_p, &r_c, &s, &lam);
            // separate primal and dual step lengths: a common one can cycle
            // when both sides of a narrow box carry multipliers
            let alpha_p = (0.995 * max_step(&s, &ds)).min(1.0);
            let alpha_d = (0.995 * max_step(&lam, &dl)).min(1.0);
            z += &dz * alpha_p;
            s += &ds * alpha_p;
            lam += &dl * alpha_d;
            // keep strictly interior
            s.apply(|v| *v = v.max(1e-300));
            lam.apply(|v| *v = v.max(1e-300));
        }

        let kkt_residual = kkt_residuals(qp, &z, &lam).max();
        Ok(QpSolution {
            z,
            lambda: lam,
            status,
            kkt_residual,
            iterations,
        })
    }

    fn factorize(&self, qp: &DenseQp, w: &Vector) -> Option<(Mat, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        let mut weighted = qp.c.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let kkt = qp.c.tr_mul(&weighted) + &qp.h;
        let mut reg = self.settings.reg;
        for _ in 0..12 {
            let mut k = kkt.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += reg;
            }
            if let Some(ch) = k.cholesky() {
                return Some((kkt, ch));
            }
            reg *= 100.0;
        }
        None
    }

    /// Farkas certificate: `lam >= 0`, `C' lam ~ 0`, `d' lam > 0` proves
    /// `Cz + d <= 0` has no solution.
    fn infeasibility_certificate(&self, qp: &DenseQp, lam: &Vector) -> bool {
        let norm = lam.iter().sum::<f64>();
        if norm < 1e6 {
            return false;
        }
        let lhat = lam / norm;
        let ct = inf_norm(&qp.c.tr_mul(&lhat));
        let scale = qp.c.abs().max().max(1.0);
        ct <= 1e-7 * scale && qp.d.dot(&lhat) > 1e-7
    }
}

/// Solves the equality-constrained QP on the guessed active set
/// `{i : lam_i > s_i}` directly. Returns `None` if the guess is not
/// consistent (singular system, negative multiplier, violated inactive row).
fn polish(qp: &DenseQp, z: &Vector, lam: &Vector, s: &Vector) -> Option<(Vector, Vector)> {
    let n = qp.n();
    let active: Vec<usize> = (0..qp.m()).filter(|&i| lam[i] > s[i]).collect();
    let na = active.len();
    let mut kkt = Mat::zeros(n + na, n + na);
    let mut rhs = Vector::zeros(n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    rhs.rows_mut(0, n).copy_from(&(-&qp.g));
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = qp.c[(i, j)];
            kkt[(j, n + r)] = qp.c[(i, j)];
        }
        rhs[n + r] = -qp.d[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let zp = sol.rows(0, n).into_owned();
    let mut lp = Vector::zeros(qp.m());
    for (r, &i) in active.iter().enumerate() {
        if sol[n + r] < 0.0 {
            return None;
        }
        lp[i] = sol[n + r];
    }
    if (&zp - z).amax() > 1e-3 * (1.0 + z.amax()) {
        return None;
    }
    Some((zp, lp))
}

/// Newton direction for the linearized KKT system given the complementarity
/// right-hand side `r_c`.
/// Cholesky solve of the regularized matrix followed by refinement
/// against the unregularized one; the reduced system gets badly scaled
/// when barrier weights spread over many decades.
fn refined_solve(kkt: &Mat, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, rhs: &Vector) -> Vector {
    let mut x = chol.solve(rhs);
    for _ in 0..2 {
        let r = rhs - kkt * &x;
        x += chol.solve(&r);
    }
    x
}

fn direction(
    qp: &DenseQp,
    kkt: &Mat,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    r_d: &Vector,
    r_p: &Vector,
    r_c: &Vector,
    s: &Vector,
    lam: &Vector,
) -> (Vector, Vector, Vector) {
    // (H + C' (L/S) C) dz = -r_d - C' S^{-1} (L r_p - r_c)
    let t = (lam.component_mul(r_p) - r_c).component_div(s);
    let rhs = -(r_d + qp.c.tr_mul(&t));
    let dz = refined_solve(kkt, chol, &rhs);
    let ds = -(r_p + &qp.c * &dz);
    let dl = -(r_c + lam.component_mul(&ds)).component_div(s);
    (dz, ds, dl)
}
