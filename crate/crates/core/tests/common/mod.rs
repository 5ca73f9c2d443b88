//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zoro_mpc::ocp::{build_lti_ocp, LtiOcp, OcpSpec};
use zoro_mpc::sqp::StageQp;

pub type M = DMatrix<f64>;
pub type V = DVector<f64>;

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
    M::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random PSD matrix, rank-deficient in some draws.
pub fn rand_psd(rng: &mut ChaCha8Rng, n: usize) -> M {
    let r = rng.random_range(1..=n);
    let l = rand_mat(rng, n, r);
    &l * l.transpose()
}

pub fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> M {
    let l = rand_mat(rng, n, n);
    &l * l.transpose() + M::identity(n, n) * 0.5
}

pub fn random_lti(rng: &mut ChaCha8Rng, nx: usize, nu: usize, n: usize, u_max: Option<f64>, x_max: Option<f64>) -> OcpSpec {
    build_lti_ocp(&LtiOcp {
        a: rand_mat(rng, nx, nx),
        b: rand_mat(rng, nx, nu),
        q: rand_spd(rng, nx),
        r: rand_spd(rng, nu),
        q_terminal: rand_spd(rng, nx),
        n_intervals: n,
        horizon: 0.2 * n as f64,
        x0: V::from_fn(nx, |_, _| rng.random_range(-2.0..2.0)),
        u_max,
        x_max,
        integrator: None,
    })
    .unwrap()
}

/// Entry-wise evaluation of `(A+BK) P (A+BK)^T + G W G^T`.
pub fn propagation_oracle(a: &M, b: &M, k: &M, p: &M, g: &M, w: &M) -> M {
    let (nx, nu, nw) = (a.nrows(), b.ncols(), w.nrows());
    let phi = |i: usize, j: usize| a[(i, j)] + (0..nu).map(|l| b[(i, l)] * k[(l, j)]).sum::<f64>();
    M::from_fn(nx, nx, |i, j| {
        let mut s = 0.0;
        for r in 0..nx {
            for c in 0..nx {
                s += phi(i, r) * p[(r, c)] * phi(j, c);
            }
        }
        for r in 0..nw {
            for c in 0..nw {
                s += g[(i, r)] * w[(r, c)] * g[(j, c)];
            }
        }
        s
    })
}

/// `gamma * sqrt(v^T P v)` with `v = grad_x + K^T grad_u`, summed entry by entry.
pub fn backoff_oracle(grad: &V, k: &M, p: &M, gamma: f64) -> f64 {
    let nx = p.nrows();
    let nu = k.nrows();
    let v: Vec<f64> = (0..nx)
        .map(|i| grad[i] + (0..nu).map(|j| k[(j, i)] * grad[nx + j]).sum::<f64>())
        .collect();
    let mut q = 0.0;
    for i in 0..nx {
        for j in 0..nx {
            q += v[i] * p[(i, j)] * v[j];
        }
    }
    gamma * q.max(0.0).sqrt()
}

/// Solves the stage-wise QP directly: equality-constrained KKT system with
/// the given inequality rows treated as equalities. Returns the primal
/// deltas per node and the multipliers of the imposed rows.
pub fn sparse_kkt(qp: &StageQp, nx: usize, nu: usize, active: &[(usize, usize)]) -> (Vec<V>, Vec<V>, V) {
    let n = qp.a.len();
    let off = |k: usize| k * (nx + nu);
    let nv = n * (nx + nu) + nx;
    let neq = (n + 1) * nx;
    let na = active.len();
    let dim = nv + neq + na;
    let mut kkt = M::zeros(dim, dim);
    let mut rhs = V::zeros(dim);
    for k in 0..=n {
        let w = if k < n { nx + nu } else { nx };
        kkt.view_mut((off(k), off(k)), (w, w)).copy_from(&qp.hess[k]);
        rhs.rows_mut(off(k), w).copy_from(&(-&qp.grad[k]));
    }
    // dx_0 = dx0, dx_{k+1} = A dx_k + B du_k + c_k
    let mut e = M::zeros(neq, nv);
    let mut eb = V::zeros(neq);
    e.view_mut((0, 0), (nx, nx)).fill_with_identity();
    eb.rows_mut(0, nx).copy_from(&qp.dx0);
    for k in 0..n {
        let r = (k + 1) * nx;
        e.view_mut((r, off(k)), (nx, nx)).copy_from(&(-&qp.a[k]));
        e.view_mut((r, off(k) + nx), (nx, nu)).copy_from(&(-&qp.b[k]));
        e.view_mut((r, off(k + 1)), (nx, nx)).fill_with_identity();
        eb.rows_mut(r, nx).copy_from(&qp.defects[k]);
    }
    kkt.view_mut((nv, 0), (neq, nv)).copy_from(&e);
    kkt.view_mut((0, nv), (nv, neq)).copy_from(&e.transpose());
    rhs.rows_mut(nv, neq).copy_from(&eb);
    for (j, &(k, i)) in active.iter().enumerate() {
        let w = if k < n { nx + nu } else { nx };
        let row = qp.cons_grad[k].view((i, 0), (1, w)).into_owned();
        kkt.view_mut((nv + neq + j, off(k)), (1, w)).copy_from(&row);
        kkt.view_mut((off(k), nv + neq + j), (w, 1)).copy_from(&row.transpose());
        rhs[nv + neq + j] = -qp.cons_val[k][i];
    }
    let sol = kkt.lu().solve(&rhs).expect("nonsingular sparse KKT");
    let dx = (0..=n).map(|k| sol.rows(off(k), nx).into_owned()).collect();
    let du = (0..n).map(|k| sol.rows(off(k) + nx, nu).into_owned()).collect();
    (dx, du, sol.rows(nv + neq, na).into_owned())
}

/// Exact ERK4 map of a linear system: truncated exponential series.
pub fn erk4_discretization(a: &M, b: &M, h: f64) -> (M, M) {
    let n = a.nrows();
    let i = M::identity(n, n);
    let ha = a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ad = &i + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha3 * &ha / 24.0;
    let bd = (&i + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0) * b * h;
    (ad, bd)
}

/// First-stage gain of the finite-horizon Riccati recursion, `u_0 = K_0 x_0`.
pub fn riccati_first_gain(ad: &M, bd: &M, q: &M, r: &M, q_terminal: &M, n: usize) -> M {
    let mut pm = q_terminal.clone();
    let mut k0 = M::zeros(bd.ncols(), ad.nrows());
    for _ in 0..n {
        let s = r + bd.transpose() * &pm * bd;
        let k = -s.lu().solve(&(bd.transpose() * &pm * ad)).unwrap();
        pm = q + ad.transpose() * &pm * ad + ad.transpose() * &pm * bd * &k;
        pm = (&pm + pm.transpose()) * 0.5;
        k0 = k;
    }
    k0
}
