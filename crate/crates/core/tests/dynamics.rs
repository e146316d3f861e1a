mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use ngtc_core::dynamics::{rk4_step, Disturbance, QuadParams, QuadState};
use ngtc_core::math::{Quat, Vec3};
use ngtc_core::Error;

use common::{euler_oracle, flat, max_state_diff};

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
}

fn state(p: &QuadParams, x: [f64; 3], v: [f64; 3], axis: [f64; 3], angle: f64, w: [f64; 3], u: [f64; 4]) -> QuadState<f64> {
    let axis = Vec3::from_f64(axis);
    let q = if axis.norm() < 1e-6 {
        Quat::identity()
    } else {
        Quat::from_axis_angle(axis / axis.norm(), angle)
    };
    let mut s = QuadState::hover_at(x, p);
    s.v = Vec3::from_f64(v);
    s.q = q;
    s.omega = Vec3::from_f64(w);
    s.thrusts = u;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rk4_matches_euler_oracle(
        x in vec3(), v in vec3(), axis in vec3(), angle in -3.0f64..3.0, w in vec3(),
        du in prop::array::uniform4(-0.2f64..0.2), f in vec3(),
    ) {
        let p = QuadParams::default();
        let u = du.map(|d| p.hover_thrust() + d);
        let s = state(&p, x.map(|c| 5.0 * c), v.map(|c| 5.0 * c), axis, angle, w.map(|c| 2.0 * c), u);
        let dist = Disturbance::force(f.map(|c| 3.0 * c));
        let rk = rk4_step(&s, &u, &dist, &p, 0.01, true).unwrap();
        let oracle = euler_oracle(&flat(&s), &u, &dist, &p, true, 0.01);
        prop_assert!(max_state_diff(&flat(&rk), &oracle) < 1e-8);
    }

    #[test]
    fn step_keeps_unit_quaternion_and_thrust_box(
        axis in vec3(), angle in -3.0f64..3.0, w in vec3(),
        u0 in prop::array::uniform4(0.0f64..1.0), cmd in prop::array::uniform4(-2.0f64..6.0),
    ) {
        let p = QuadParams::default();
        let u0 = u0.map(|c| p.u_min + c * (p.u_max - p.u_min));
        let mut s = state(&p, [0.0; 3], [0.0; 3], axis, angle, w.map(|c| 10.0 * c), u0);
        for _ in 0..50 {
            s = rk4_step(&s, &cmd, &Disturbance::default(), &p, 0.01, true).unwrap();
            prop_assert!((s.q.norm() - 1.0).abs() < 1e-12);
            prop_assert!(s.thrusts.iter().all(|u| (p.u_min..=p.u_max).contains(u)));
        }
    }
}

#[test]
fn torque_free_rotation_conserves_angular_momentum() {
    // Equal rotor thrusts give zero torque; |J Ω| is a first integral.
    let p = QuadParams::default();
    let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
    s.omega = Vec3::new(3.0, -1.0, 2.0);
    let momentum = |s: &QuadState<f64>| s.omega.hadamard(Vec3::from_f64(p.inertia)).norm();
    let h0 = momentum(&s);
    for _ in 0..100 {
        s = rk4_step(&s, &s.thrusts.clone(), &Disturbance::default(), &p, 0.01, false).unwrap();
    }
    assert_abs_diff_eq!(momentum(&s), h0, epsilon = 1e-9 * h0);
}

#[test]
fn constant_force_gives_exact_parabola() {
    let p = QuadParams::default();
    let hover = QuadState::<f64>::hover_at([0.0; 3], &p);
    let f = [0.72, 0.0, 0.0];
    let mut s = hover;
    for _ in 0..100 {
        s = rk4_step(&s, &hover.thrusts, &Disturbance::force(f), &p, 0.01, false).unwrap();
    }
    // a = f/m = 1 m/s² for one second
    assert_abs_diff_eq!(s.v.x, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.x.x, 0.5, epsilon = 1e-12);
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = QuadParams::default();
    let s = QuadState::<f64>::hover_at([0.0; 3], &p);
    let bad_cmd = [f64::NAN, 1.0, 1.0, 1.0];
    assert!(matches!(rk4_step(&s, &bad_cmd, &Disturbance::default(), &p, 0.01, true), Err(Error::NonFinite { .. })));
    assert!(matches!(rk4_step(&s, &s.thrusts, &Disturbance::default(), &p, 0.0, true), Err(Error::InvalidParameter(_))));
    let mut skew = s;
    skew.q = Quat::new(2.0, 0.0, 0.0, 0.0);
    assert!(matches!(rk4_step(&skew, &s.thrusts, &Disturbance::default(), &p, 0.01, true), Err(Error::QuaternionNorm { .. })));
}
