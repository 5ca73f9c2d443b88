mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoro_mpc::linalg::min_eigenvalue;
use common::{erk4_discretization, rand_mat, rand_spd, random_lti, riccati_first_gain, sparse_kkt, V};
use zoro_mpc::ocp::{build_diff_drive_ocp, build_lti_ocp, DiffDriveScenario, LtiOcp};
use zoro_mpc::sqp::{sqp_iteration, sqp_solve, Iterate, SolveStatus, SqpSettings, SqpSolver};

#[test]
fn condensed_solution_matches_sparse_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nx, nu, n) = (2, 1, 3);
    let mut with_active = 0;
    for trial in 0..30 {
        let spec = random_lti(&mut rng, nx, nu, n, Some(0.4), Some(1.5));
        let mut guess = Iterate::constant(&spec, &spec.x0);
        for x in guess.x.iter_mut() {
            *x = V::from_fn(nx, |_, _| rng.random_range(-0.5..0.5));
        }
        for u in guess.u.iter_mut() {
            *u = V::from_fn(nu, |_, _| rng.random_range(-0.2..0.2));
        }
        let mut s = SqpSolver::new(spec.clone(), Some(guess.clone()), SqpSettings::default()).unwrap();
        s.prepare().unwrap();
        let x0_bar = V::from_fn(nx, |_, _| rng.random_range(-2.0..2.0));
        let stage = s.stage_qp(&x0_bar).unwrap();
        let fb = s.feedback(&x0_bar).unwrap();
        if !fb.applied {
            continue; // random instance with an infeasible state box
        }
        let it = s.iterate();
        let active: Vec<(usize, usize)> = (0..=n)
            .flat_map(|k| (0..it.lam[k].len()).map(move |i| (k, i)))
            .filter(|&(k, i)| it.lam[k][i] > 1e-7)
            .collect();
        if !active.is_empty() {
            with_active += 1;
        }
        let (dx, du, mu) = sparse_kkt(&stage, nx, nu, &active);
        for k in 0..=n {
            let err = (&it.x[k] - &guess.x[k] - &dx[k]).amax();
            assert!(err <= 1e-10, "trial {trial} x[{k}] err {err:e}");
        }
        for k in 0..n {
            let err = (&it.u[k] - &guess.u[k] - &du[k]).amax();
            assert!(err <= 1e-10, "trial {trial} u[{k}] err {err:e}");
        }
        // oracle certifies optimality: dual feasibility and primal feasibility
        assert!(mu.iter().all(|m| *m >= -1e-8), "trial {trial}: negative multiplier");
        for k in 0..=n {
            let w = if k < n { nx + nu } else { nx };
            let mut dy = V::zeros(w);
            dy.rows_mut(0, nx).copy_from(&dx[k]);
            if k < n {
                dy.rows_mut(nx, nu).copy_from(&du[k]);
            }
            let lin = &stage.cons_val[k] + stage.cons_grad[k].columns(0, w) * &dy;
            assert!(lin.iter().all(|v| *v <= 1e-9), "trial {trial}: infeasible at node {k}");
        }
    }
    assert!(with_active >= 5, "too few instances exercised active constraints");
}

#[test]
fn lqr_matches_riccati_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nx, nu, n) = (4, 2, 10);
    for _ in 0..5 {
        let p = LtiOcp {
            a: rand_mat(&mut rng, nx, nx),
            b: rand_mat(&mut rng, nx, nu),
            q: rand_spd(&mut rng, nx),
            r: rand_spd(&mut rng, nu),
            q_terminal: rand_spd(&mut rng, nx),
            n_intervals: n,
            horizon: 1.0,
            x0: V::zeros(nx),
            u_max: None,
            x_max: None,
            integrator: None,
        };
        let spec = build_lti_ocp(&p).unwrap();
        let (ad, bd) = erk4_discretization(&p.a, &p.b, spec.dt());
        let k0 = riccati_first_gain(&ad, &bd, &p.q, &p.r, &p.q_terminal, n);
        let x0_bar = V::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
        let mut s = SqpSolver::new(spec.clone(), None, SqpSettings::default()).unwrap();
        assert_eq!(s.iterate().x[0], V::zeros(nx));
        s.prepare().unwrap();
        let fb = s.feedback(&x0_bar).unwrap();
        let err = (&fb.u0 - &k0 * &x0_bar).amax();
        assert!(err <= 1e-8, "riccati mismatch {err:e}");

        let mut spec2 = spec.clone();
        spec2.x0 = x0_bar.clone();
        let (it, rep) = sqp_solve(&spec2, None, &SqpSettings::default(), None).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert_eq!(rep.iterations, 1);
        assert!((&it.u[0] - &k0 * &x0_bar).amax() <= 1e-8);
    }
}

#[test]
fn split_matches_atomic_iteration() {
    let sc = DiffDriveScenario::default();
    let spec = build_diff_drive_ocp(&sc).unwrap();
    let settings = SqpSettings::default();
    let mut s = SqpSolver::new(spec.clone(), None, settings).unwrap();
    let mut x0_bar = spec.x0.clone();
    x0_bar[1] = 0.03;
    x0_bar[3] = 0.2;
    for _ in 0..4 {
        // tighten some bounds to exercise the bound path
        for ub in s.bounds_mut().effective.iter_mut() {
            for v in ub.iter_mut() {
                *v -= 1e-4;
            }
        }
        let before = s.iterate().clone();
        let bounds = s.bounds().clone();
        s.prepare().unwrap();
        let fb = s.feedback(&x0_bar).unwrap();
        let (atomic, fb2) = sqp_iteration(&spec, &before, &x0_bar, &bounds, &settings).unwrap();
        assert!(fb.applied && fb2.applied);
        let it = s.iterate();
        for (a, b) in it.x.iter().chain(&it.u).zip(atomic.x.iter().chain(&atomic.u)) {
            assert!((a - b).amax() <= 1e-14);
        }
        assert!((&fb.u0 - &fb2.u0).amax() <= 1e-14);
    }
}

#[test]
fn diff_drive_nominal_converges_with_small_defects() {
    let sc = DiffDriveScenario::default();
    let spec = build_diff_drive_ocp(&sc).unwrap();
    let settings = SqpSettings {
        record_history: true,
        ..Default::default()
    };
    let mut s = SqpSolver::new(spec.clone(), None, settings).unwrap();
    let rep = s.solve(&spec.x0.clone(), None).unwrap();
    assert_eq!(rep.status, SolveStatus::Converged, "{:?}", rep.logs.last());
    assert!(rep.iterations <= 50);
    assert_eq!(rep.history.len(), rep.iterations);
    let ws = s.workspace().unwrap();
    for d in ws.defects(s.iterate()) {
        assert!(d.amax() <= 1e-8);
    }
    // Gauss-Newton Hessian PSD at every iterate of the run
    for it in &rep.history {
        let mut t = SqpSolver::new(spec.clone(), Some(it.clone()), settings).unwrap();
        t.prepare().unwrap();
        assert!(min_eigenvalue(&t.workspace().unwrap().condensed.h) >= -1e-10);
    }
    // the robot actually moves forward and stays clear of the obstacles
    let last = s.iterate().x.last().unwrap();
    assert!(last[0] > 0.3);
    for x in &s.iterate().x {
        assert!(sc.clearances(x).iter().all(|c| *c >= -1e-8));
    }
}

#[test]
fn infeasible_qp_is_reported_without_applying_the_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = random_lti(&mut rng, 2, 1, 3, Some(0.1), Some(0.1));
    let mut s = SqpSolver::new(spec, None, SqpSettings::default()).unwrap();
    s.prepare().unwrap();
    let before = s.iterate().clone();
    // a huge initial state cannot be brought inside the state box in one step
    let fb = s.feedback(&V::from_element(2, 50.0)).unwrap();
    assert!(!fb.applied);
    assert_eq!(s.iterate(), &before);
}
