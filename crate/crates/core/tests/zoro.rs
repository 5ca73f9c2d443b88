use std::time::Instant;

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use common::{backoff_oracle, propagation_oracle, rand_mat, rand_psd, M, V};
use zoro_mpc::check::check_feasibility;
use zoro_mpc::linalg::{diag, min_eigenvalue};
use zoro_mpc::ocp::{build_diff_drive_ocp, build_lti_ocp, DiffDriveScenario, LtiOcp, OcpSpec};
use zoro_mpc::sqp::{sqp_solve, SolveStatus, SqpSettings, SqpSolver};
use zoro_mpc::zoro::{
    compute_backoff, propagate_uncertainty, zoro_rti_feedback, zoro_rti_prepare, zoro_sqp, zoro_update,
    zoro_update_with, ZoroConfig, ZoroStatus,
};

#[test]
fn propagation_matches_direct_evaluation_and_preserves_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for _ in 0..1000 {
        let nx = rng.random_range(1..=8);
        let nu = rng.random_range(1..=4);
        let nw = rng.random_range(1..=nx);
        let (a, b, k) = (rand_mat(&mut rng, nx, nx), rand_mat(&mut rng, nx, nu), rand_mat(&mut rng, nu, nx));
        let g = rand_mat(&mut rng, nx, nw);
        let (p, w) = (rand_psd(&mut rng, nx), rand_psd(&mut rng, nw));
        let out = propagate_uncertainty(&a, &b, &k, &p, &g, &w);
        let oracle = propagation_oracle(&a, &b, &k, &p, &g, &w);
        let scale = oracle.amax().max(1.0);
        assert!((&out - &oracle).amax() <= 1e-12 * scale);
        assert_eq!(out, out.transpose());
        assert!(min_eigenvalue(&out) >= -1e-10);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn backoff_oracle_monotonicity_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let nx = rng.random_range(1..=8);
        let nu = rng.random_range(1..=4);
        let k = rand_mat(&mut rng, nu, nx);
        let p = rand_psd(&mut rng, nx);
        let grad = V::from_fn(nx + nu, |_, _| rng.random_range(-1.0..1.0));
        let gamma = rng.random_range(0.0..4.0);
        let beta = compute_backoff(&grad, &k, &p, gamma).unwrap();
        assert!((beta - backoff_oracle(&grad, &k, &p, gamma)).abs() <= 1e-12 * beta.max(1.0));
        assert!(beta >= 0.0);

        let bigger = &p + rand_psd(&mut rng, nx);
        assert!(compute_backoff(&grad, &k, &bigger, gamma).unwrap() >= beta - 1e-12);

        let s = rng.random_range(0.1..3.0);
        let scaled = compute_backoff(&grad, &k, &(&p * (s * s)), gamma).unwrap();
        assert!((scaled - s * beta).abs() <= 1e-12 * beta.max(1.0));
    }
}

fn diff_drive() -> (DiffDriveScenario, OcpSpec) {
    let sc = DiffDriveScenario::default();
    let spec = build_diff_drive_ocp(&sc).unwrap();
    (sc, spec)
}

#[test]
fn collision_row_backoff_matches_quadratic_form() {
    let (_, spec) = diff_drive();
    let (it, _) = sqp_solve(&spec, None, &SqpSettings::default(), None).unwrap();
    let mut s = SqpSolver::new(spec.clone(), Some(it), SqpSettings::default()).unwrap();
    s.prepare().unwrap();
    let cfg = ZoroConfig::diff_drive(&spec).unwrap();
    let tube = zoro_update(&mut s, &cfg).unwrap();
    let ws = s.workspace().unwrap();
    let row = 8; // first collision row at intermediate nodes
    for k in 1..spec.n_intervals {
        let grad = ws.nodes[k].grad.row(row).transpose();
        let expected = backoff_oracle(&grad, &cfg.k, &tube.p[k], cfg.gamma);
        assert!((tube.backoff[k][row] - expected).abs() <= 1e-12);
        assert!(tube.backoff[k][row] > 0.0);
    }
}

#[test]
fn lyapunov_recursion_on_lti() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (nx, nu, n) = (3, 2, 8);
    let p = LtiOcp {
        a: rand_mat(&mut rng, nx, nx),
        b: rand_mat(&mut rng, nx, nu),
        q: M::identity(nx, nx),
        r: M::identity(nu, nu),
        q_terminal: M::identity(nx, nx),
        n_intervals: n,
        horizon: 0.8,
        x0: V::from_element(nx, 0.1),
        u_max: Some(1.0),
        x_max: Some(2.0),
        integrator: None,
    };
    let spec = build_lti_ocp(&p).unwrap();
    let mut cfg = ZoroConfig::zero(&spec);
    cfg.k = rand_mat(&mut rng, nu, nx);
    cfg.w = rand_psd(&mut rng, nx);
    cfg.p0_bar = rand_psd(&mut rng, nx);
    let mut s = SqpSolver::new(spec.clone(), None, SqpSettings::default()).unwrap();
    s.prepare().unwrap();
    let tube = zoro_update(&mut s, &cfg).unwrap();

    // closed form: P_k = Phi^k P0 Phi^kT + sum_{j<k} Phi^j W Phi^jT with the
    // exact RK4 transition of the linear system
    let h = spec.dt();
    let ha = &p.a * h;
    let i = M::identity(nx, nx);
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ad = &i + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha3 * &ha / 24.0;
    let bd = (&i + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0) * &p.b * h;
    let phi = &ad + &bd * &cfg.k;
    for k in 0..=n {
        let mut expected = phi.pow(k as u32) * &cfg.p0_bar * phi.pow(k as u32).transpose();
        for j in 0..k {
            let pj = phi.pow(j as u32);
            expected += &pj * &cfg.w * pj.transpose();
        }
        let scale = expected.amax().max(1.0);
        assert!((&tube.p[k] - &expected).amax() <= 1e-12 * scale, "node {k}");
    }
}

#[test]
fn zero_uncertainty_reproduces_nominal_iterates() {
    // start in front of the first obstacle so the collision rows are active
    let spec = build_diff_drive_ocp(&DiffDriveScenario {
        x0: [0.8, 0.0, 0.0, 0.5, 0.0],
        ..Default::default()
    })
    .unwrap();
    let settings = SqpSettings {
        record_history: true,
        ..Default::default()
    };
    let (_, nominal) = sqp_solve(&spec, None, &settings, None).unwrap();
    let mut cfg = ZoroConfig::diff_drive(&spec).unwrap();
    cfg.w = M::zeros(5, 5);
    cfg.p0_bar = M::zeros(5, 5);
    let robust = zoro_sqp(&spec, &cfg, None, &settings).unwrap();
    assert_eq!(robust.status, ZoroStatus::Converged);
    assert!(nominal.history.len() > 1);
    assert!(robust.tube.is_zero());
    assert_eq!(robust.history.len(), nominal.history.len());
    for (a, b) in robust.history.iter().zip(&nominal.history) {
        for (x, y) in a.x.iter().chain(&a.u).zip(b.x.iter().chain(&b.u)) {
            assert!((x - y).amax() <= 1e-12);
        }
    }
}

#[test]
fn converged_robust_solution_passes_independent_check() {
    let (_, spec) = diff_drive();
    let cfg = ZoroConfig::diff_drive(&spec).unwrap();
    let out = zoro_sqp(&spec, &cfg, None, &SqpSettings::default()).unwrap();
    assert_eq!(out.status, ZoroStatus::Converged, "{:?}", out.logs.last());
    let rep = check_feasibility(&spec, &cfg, &out.iterate.x, &out.iterate.u, 1e-6).unwrap();
    assert!(rep.passed(), "{rep:?}");
    // backoffs are actually active on this scenario
    assert!(out.tube.backoff.iter().any(|b| b.amax() > 1e-2));

}

#[test]
fn nominal_solution_fails_tightened_check_near_obstacle() {
    let sc = DiffDriveScenario {
        x0: [0.8, 0.0, 0.0, 0.5, 0.0],
        ..Default::default()
    };
    let spec = build_diff_drive_ocp(&sc).unwrap();
    let cfg = ZoroConfig::diff_drive(&spec).unwrap();
    let (nominal, rep) = sqp_solve(&spec, None, &SqpSettings::default(), None).unwrap();
    assert_eq!(rep.status, SolveStatus::Converged);
    let nominal_check = check_feasibility(&spec, &cfg, &nominal.x, &nominal.u, 1e-6).unwrap();
    assert!(!nominal_check.passed());
    assert!(nominal_check.violations.iter().any(|v| v.row >= 8), "{nominal_check:?}");

    let robust = zoro_sqp(&spec, &cfg, None, &SqpSettings::default()).unwrap();
    assert_eq!(robust.status, ZoroStatus::Converged);
    let robust_check = check_feasibility(&spec, &cfg, &robust.iterate.x, &robust.iterate.u, 1e-6).unwrap();
    assert!(robust_check.passed(), "{robust_check:?}");
}

#[test]
fn tightening_cannot_improve_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (nx, nu) = (2, 1);
        let spec = build_lti_ocp(&LtiOcp {
            a: rand_mat(&mut rng, nx, nx) * 0.5,
            b: rand_mat(&mut rng, nx, nu),
            q: diag(&[1.0, 1.0]),
            r: diag(&[0.1]),
            q_terminal: diag(&[1.0, 1.0]),
            n_intervals: 6,
            horizon: 0.6,
            x0: V::from_fn(nx, |_, _| rng.random_range(-1.5..1.5)),
            u_max: Some(2.0),
            x_max: Some(1.6),
            integrator: None,
        })
        .unwrap();
        let settings = SqpSettings::default();
        let mut nominal = SqpSolver::new(spec.clone(), None, settings).unwrap();
        let rep = nominal.solve(&spec.x0.clone(), None).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        let nominal_cost = nominal.workspace().unwrap().total_cost();

        let mut cfg = ZoroConfig::zero(&spec);
        cfg.w = diag(&[1e-3, 1e-3]);
        cfg.tighten.mid = (0..6).collect();
        cfg.tighten.terminal = (0..4).collect();
        let mut robust = SqpSolver::new(spec.clone(), None, settings).unwrap();
        let out = zoro_mpc::zoro::zoro_solve(&mut robust, &cfg, &spec.x0.clone()).unwrap();
        if out.status != ZoroStatus::Converged {
            continue;
        }
        let robust_cost = robust.workspace().unwrap().total_cost();
        assert!(robust_cost - nominal_cost >= -1e-8);
    }
}

#[test]
fn tightened_infeasibility_is_distinguished() {
    let (_, spec) = diff_drive();
    let mut cfg = ZoroConfig::diff_drive(&spec).unwrap();
    cfg.gamma = 200.0;
    let out = zoro_sqp(&spec, &cfg, None, &SqpSettings::default()).unwrap();
    assert_eq!(out.status, ZoroStatus::TightenedInfeasible);
}

#[test]
fn constant_noise_override_matches_default() {
    let (_, spec) = diff_drive();
    let cfg = ZoroConfig::diff_drive(&spec).unwrap();
    let mut s = SqpSolver::new(spec, None, SqpSettings::default()).unwrap();
    s.prepare().unwrap();
    let a = zoro_update(&mut s, &cfg).unwrap();
    let w = cfg.w.clone();
    let b = zoro_update_with(&mut s, &cfg, Some(&move |_| w.clone())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rti_variants_agree() {
    let (_, spec) = diff_drive();
    let settings = SqpSettings::default();
    let (it, _) = sqp_solve(&spec, None, &settings, None).unwrap();
    let mut x0_bar = it.x[1].clone();
    x0_bar[3] += 0.02;

    // zero uncertainty: robust RTI is plain RTI bit for bit
    let mut plain = SqpSolver::new(spec.clone(), Some(it.clone()), settings).unwrap();
    plain.shift();
    plain.prepare().unwrap();
    let u_plain = plain.feedback(&x0_bar).unwrap().u0;
    let mut zero = SqpSolver::new(spec.clone(), Some(it.clone()), settings).unwrap();
    zero.shift();
    let mut zcfg = ZoroConfig::diff_drive(&spec).unwrap();
    zcfg.w = M::zeros(5, 5);
    zcfg.p0_bar = M::zeros(5, 5);
    zoro_rti_prepare(&mut zero, &zcfg).unwrap();
    assert_eq!(zoro_rti_feedback(&mut zero, &x0_bar).unwrap().u0, u_plain);

    // propagation in the preparation phase or right before feedback
    let cfg = ZoroConfig::diff_drive(&spec).unwrap();
    let mut early = SqpSolver::new(spec.clone(), Some(it.clone()), settings).unwrap();
    early.shift();
    zoro_rti_prepare(&mut early, &cfg).unwrap();
    let u_early = zoro_rti_feedback(&mut early, &x0_bar).unwrap().u0;
    let mut late = SqpSolver::new(spec.clone(), Some(it), settings).unwrap();
    late.shift();
    late.prepare().unwrap();
    zoro_update(&mut late, &cfg).unwrap();
    let u_late = late.feedback(&x0_bar).unwrap().u0;
    assert_eq!(u_early, u_late);

    // two samples with the same measurement: u_0 moves by at most one step
    let fb = zoro_rti_feedback(&mut early, &x0_bar);
    assert!(fb.is_err(), "feedback without prepare must fail");
    zoro_rti_prepare(&mut early, &cfg).unwrap();
    let fb2 = zoro_rti_feedback(&mut early, &x0_bar).unwrap();
    assert!((&fb2.u0 - &u_early).amax() <= fb2.step_norm + 1e-12);
}
