use std::f64::consts::FRAC_PI_4;

use nalgebra::DVector;

use taskreg_core::config::reference_scenario;
use taskreg_core::controllers::{
    full_state_ctl_derivative, velocity_free_ctl_derivative, FullMeasurement, FullStateCtlState, PositionMeasurement,
    VelocityFreeCtlState,
};
use taskreg_core::dynamics::{forward_dynamics, JointState, Manipulator};
use taskreg_core::internal_model::stack_sigma;
use taskreg_core::simulation::{
    integrate_final_state, metrics::tail_start, rk4_step, simulate, ClosedLoop, ControllerKind, Scenario,
};

/// Elbow-down inverse kinematics of the two-link arm.
fn inverse_kinematics(l1: f64, l2: f64, x: &DVector<f64>) -> DVector<f64> {
    let r2 = x.norm_squared();
    let c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    let q2 = c2.clamp(-1.0, 1.0).acos();
    let q1 = x[1].atan2(x[0]) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    DVector::from_vec(vec![q1, q2])
}

/// Reference scenario started on its steady-state manifold: `e = 0`,
/// `ξ = 0` and the internal models already reproducing the disturbance.
fn converged(kind: ControllerKind) -> Scenario {
    let mut scn = reference_scenario();
    scn.controller = kind;
    let p = scn.model.params;
    scn.q0 = inverse_kinematics(p.l1, p.l2, &scn.x_d);
    let (s1, s2) = scn.ims.solve(&scn.exo).unwrap();
    let sigma_w = stack_sigma(&s1.sigma, &s2.sigma) * &scn.exo.w0;
    let ctl0 = match kind {
        ControllerKind::FullState => sigma_w,
        _ => {
            // Aζ − B[q; e] = Σw with e = 0.
            let a = scn.ims.stacked_a();
            let b = scn.ims.stacked_b();
            let y = DVector::from_vec(vec![scn.q0[0], scn.q0[1], 0.0, 0.0]);
            let zeta = a.lu().solve(&(sigma_w + b * y)).unwrap();
            let chi = -scn.gains.h * &scn.q0;
            DVector::from_iterator(zeta.len() + 2, zeta.iter().chain(chi.iter()).copied())
        }
    };
    scn.ctl0 = Some(ctl0);
    scn
}

#[test]
fn converged_runs_cancel_the_disturbance() {
    for kind in [
        ControllerKind::FullState,
        ControllerKind::VelocityFree,
        ControllerKind::Saturated,
    ] {
        let mut scn = converged(kind);
        scn.t_end = 10.0;
        let (log, m) = simulate(&scn).unwrap();
        assert!(m.steady_state_error < 1e-9, "{kind}: {}", m.steady_state_error);
        for r in &log.records[tail_start(&log.records)..] {
            let g = scn.model.gravity(&DVector::from_column_slice(&r.q));
            for i in 0..2 {
                assert!((r.compensation[i] + r.d[i]).abs() < 1e-3, "{kind} at {}", r.t);
                assert!((r.u[i] + r.d[i] - g[i]).abs() < 1e-3, "{kind} at {}", r.t);
            }
        }
    }
}

#[test]
fn reference_runs_stay_bounded() {
    for kind in [
        ControllerKind::FullState,
        ControllerKind::VelocityFree,
        ControllerKind::Saturated,
    ] {
        let (log, m) = simulate(&reference_scenario_with(kind)).unwrap();
        assert_eq!(log.records.len(), 20_001);
        assert!(m.min_abs_det_j > 1e-4, "{kind}");
        assert!(
            m.peak_torque.is_finite() && m.dissipation_defect < 1e-4,
            "{kind}: {m:?}"
        );
    }
}

fn reference_scenario_with(kind: ControllerKind) -> Scenario {
    let mut scn = reference_scenario();
    scn.controller = kind;
    scn
}

#[test]
fn simulate_is_deterministic() {
    let mut scn = reference_scenario_with(ControllerKind::Saturated);
    scn.t_end = 2.0;
    let (a, ma) = simulate(&scn).unwrap();
    let (b, mb) = simulate(&scn).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let x = integrate_final_state(&scn).unwrap();
    let last = a.records.last().unwrap();
    assert_eq!(&x.as_slice()[scn.exo.dim()..scn.exo.dim() + 2], last.q.as_slice());
}

#[test]
fn internal_model_norm_is_preserved_without_input() {
    let scn = reference_scenario();
    let a = scn.ims.stacked_a();
    let mut eta = DVector::from_fn(a.nrows(), |i, _| 0.1 * (i as f64 + 1.0));
    let n0 = eta.norm();
    let mut f = |_t: f64, x: &DVector<f64>| -> Result<DVector<f64>, std::convert::Infallible> { Ok(&a * x) };
    for k in 0..10_000 {
        eta = rk4_step(&mut f, k as f64 * 1e-3, &eta, 1e-3).unwrap();
    }
    assert!((eta.norm() - n0).abs() < 1e-9);
}

#[test]
fn error_systems_share_one_vector_field() {
    let scn = reference_scenario();
    let cl = ClosedLoop::new(&scn).unwrap();
    let sigma = cl.sigma.clone().unwrap();
    let (l1, l2) = scn.ims.dims();
    let a = scn.ims.stacked_a();
    let b = scn.ims.stacked_b();
    let q = DVector::from_vec(vec![0.3, FRAC_PI_4]);
    let xi = DVector::from_vec(vec![-0.7, 1.3]);
    let w = scn.exo.solution(1.7);
    let e = scn.model.forward_kinematics(&q) - &scn.x_d;
    let sw = &sigma * &w;
    let sw_dot = &sigma * (&scn.exo.s * &w);

    // Same error coordinate z in both representations.
    let z = DVector::from_fn(l1 + l2, |i, _| 0.05 * (i as f64) - 0.2);
    let eta = &z + &sw;
    let y = DVector::from_vec(vec![q[0], q[1], e[0], e[1]]);
    let zeta = a.clone().lu().solve(&(&z + &sw + &b * &y)).unwrap();

    let full = FullStateCtlState {
        eta1: eta.rows(0, l1).into_owned(),
        eta2: eta.rows(l1, l2).into_owned(),
    };
    let d_full = full_state_ctl_derivative(
        &full,
        &FullMeasurement {
            q: q.clone(),
            e: e.clone(),
            xi: xi.clone(),
        },
        &scn.model,
        &scn.ims,
    );
    let z_dot_full = DVector::from_iterator(l1 + l2, d_full.eta1.iter().chain(d_full.eta2.iter()).copied()) - &sw_dot;

    let vf = VelocityFreeCtlState {
        zeta1: zeta.rows(0, l1).into_owned(),
        zeta2: zeta.rows(l1, l2).into_owned(),
        chi: DVector::zeros(2),
    };
    let d_vf = velocity_free_ctl_derivative(
        &vf,
        &PositionMeasurement {
            q: q.clone(),
            e: e.clone(),
        },
        &scn.ims,
        &scn.gains,
    );
    let zeta_dot = DVector::from_iterator(l1 + l2, d_vf.zeta1.iter().chain(d_vf.zeta2.iter()).copied());
    let j = scn.model.jacobian(&q);
    let y_dot = DVector::from_iterator(4, xi.iter().chain((&j * &xi).iter()).copied());
    let z_dot_vf = &a * zeta_dot - &b * y_dot - &sw_dot;

    assert!((&z_dot_full - &z_dot_vf).amax() < 1e-12);
    assert!((&z_dot_full - cl.error_vector_field(&z, &q, &xi)).amax() < 1e-12);
}

#[test]
fn kinetic_energy_rate_matches_supplied_power() {
    let scn = reference_scenario();
    let model = &scn.model;
    let u = DVector::from_vec(vec![0.4, -0.2]);
    let d = DVector::from_vec(vec![0.05, 0.1]);
    let dt = 1e-4;
    let mut f = |_t: f64, x: &DVector<f64>| -> Result<DVector<f64>, taskreg_core::dynamics::DynamicsError> {
        let s = JointState::new(x.rows(0, 2).into_owned(), x.rows(2, 2).into_owned());
        let acc = forward_dynamics(model, &s, &u, &d)?;
        Ok(DVector::from_vec(vec![s.xi[0], s.xi[1], acc[0], acc[1]]))
    };
    let energy = |x: &DVector<f64>| {
        let xi = x.rows(2, 2).into_owned();
        0.5 * xi.dot(&(model.inertia(&x.rows(0, 2).into_owned()) * &xi))
    };
    let mut xs = vec![DVector::from_vec(vec![0.2, 1.1, 0.5, -0.8])];
    for k in 0..4 {
        let next = rk4_step(&mut f, k as f64 * dt, xs.last().unwrap(), dt).unwrap();
        xs.push(next);
    }
    let x = &xs[2];
    let rate = (energy(&xs[0]) - 8.0 * energy(&xs[1]) + 8.0 * energy(&xs[3]) - energy(&xs[4])) / (12.0 * dt);
    let q = x.rows(0, 2).into_owned();
    let xi = x.rows(2, 2).into_owned();
    let power = xi.dot(&(&u + &d - model.gravity(&q)));
    assert!((rate - power).abs() <= 1e-6 * power.abs().max(1.0), "{rate} vs {power}");
}
