//! Helpers shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{Matrix3, Quaternion, SVector, UnitQuaternion, Vector3, Vector4};
use ngtc_core::dynamics::{Disturbance, QuadParams, QuadState};

pub type Flat = SVector<f64, 17>;

/// Right-hand side of the vehicle model written directly against nalgebra,
/// independent of the library's own implementation.
pub fn oracle_rhs(s: &Flat, cmd: &[f64; 4], dist: &Disturbance, p: &QuadParams, drag: bool) -> Flat {
    let v = Vector3::new(s[3], s[4], s[5]);
    let q = Quaternion::new(s[6], s[7], s[8], s[9]);
    let w = Vector3::new(s[10], s[11], s[12]);
    let u = [s[13], s[14], s[15], s[16]];
    let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let beta = p.arm_angle_deg.to_radians();
    let (lx, ly) = (p.arm_length * beta.sin(), p.arm_length * beta.cos());
    let thrust: f64 = u.iter().sum();
    let mu = Vector3::new(
        lx * (-u[0] - u[1] + u[2] + u[3]),
        ly * (-u[0] + u[1] + u[2] - u[3]),
        p.kappa * (-u[0] + u[1] - u[2] + u[3]),
    );
    let mut force = r.column(2) * thrust + Vector3::from(dist.f_ext);
    if drag {
        force -= r * Matrix3::from_diagonal(&Vector3::from(p.drag)) * r.transpose() * v;
    }
    let a = force / p.mass - Vector3::new(0.0, 0.0, p.g);
    let qd = q * Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;
    let j = Matrix3::from_diagonal(&Vector3::from(p.inertia));
    let wd = j.try_inverse().expect("positive inertia") * (mu + Vector3::from(dist.mu_ext) - w.cross(&(j * w)));
    let mut d = Flat::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&v);
    d.fixed_rows_mut::<3>(3).copy_from(&a);
    d.fixed_rows_mut::<4>(6).copy_from(&Vector4::new(qd.w, qd.i, qd.j, qd.k));
    d.fixed_rows_mut::<3>(10).copy_from(&wd);
    for i in 0..4 {
        d[13 + i] = (cmd[i] - u[i]) / p.tau_mot;
    }
    d
}

/// Explicit Euler with `n` steps of size `h`; the quaternion is normalized
/// once at the end.
pub fn euler(s0: &Flat, cmd: &[f64; 4], dist: &Disturbance, p: &QuadParams, drag: bool, h: f64, n: usize) -> Flat {
    let mut s = *s0;
    for _ in 0..n {
        s += oracle_rhs(&s, cmd, dist, p, drag) * h;
    }
    let qn = s.fixed_rows::<4>(6).normalize();
    s.fixed_rows_mut::<4>(6).copy_from(&qn);
    s
}

/// Euler at 1 µs over `horizon`, with two-level Richardson extrapolation
/// (1, 1/2, 1/4 µs) removing the first- and second-order error terms.
pub fn euler_oracle(s0: &Flat, cmd: &[f64; 4], dist: &Disturbance, p: &QuadParams, drag: bool, horizon: f64) -> Flat {
    let n = (horizon / 1e-6).round() as usize;
    let h = horizon / n as f64;
    let a = euler(s0, cmd, dist, p, drag, h, n);
    let b = euler(s0, cmd, dist, p, drag, h / 2.0, 2 * n);
    let c = euler(s0, cmd, dist, p, drag, h / 4.0, 4 * n);
    (c * 8.0 - b * 6.0 + a) / 3.0
}

pub fn flat(s: &QuadState<f64>) -> Flat {
    Flat::from_column_slice(&s.to_vec())
}

/// Largest componentwise difference; quaternions are compared up to sign.
pub fn max_state_diff(a: &Flat, b: &Flat) -> f64 {
    let sign = if a.fixed_rows::<4>(6).dot(&b.fixed_rows::<4>(6)) < 0.0 { -1.0 } else { 1.0 };
    (0..17)
        .map(|i| if (6..10).contains(&i) { (a[i] - sign * b[i]).abs() } else { (a[i] - b[i]).abs() })
        .fold(0.0, f64::max)
}
