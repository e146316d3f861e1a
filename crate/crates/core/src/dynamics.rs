//! Rigid-body quadrotor model with first-order motor lag, linear body drag
//! and external disturbances, integrated with classical RK4.
//!
//! Rotor order is front-left, back-left, back-right, front-right.

use crate::error::{Error, Result};
use crate::math::{Quat, Real, Vec3};

/// Physical constants and actuator limits.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadParams {
    pub mass: f64,
    /// Principal moments of inertia (diagonal of `J`), kg·m².
    pub inertia: [f64; 3],
    pub arm_length: f64,
    pub arm_angle_deg: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub tau_mot: f64,
    pub g: f64,
    /// Rotor torque-to-thrust coefficient, m.
    pub kappa: f64,
    /// Body-frame linear drag coefficients, N·s/m.
    pub drag: [f64; 3],
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.72,
            inertia: [2.5e-3, 2.1e-3, 4.3e-3],
            arm_length: 0.14,
            arm_angle_deg: 56.0,
            u_min: 0.0,
            u_max: 8.5,
            tau_mot: 0.03,
            g: 9.81,
            kappa: 0.016,
            drag: [0.30, 0.30, 0.15],
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if self.inertia.iter().any(|&j| !(j > 0.0)) {
            return bad("inertia must be positive");
        }
        if !(self.u_min >= 0.0 && self.u_max > self.u_min) {
            return bad("need u_max > u_min >= 0");
        }
        if !(self.tau_mot > 0.0) {
            return bad("tau_mot must be positive");
        }
        if !(self.arm_length > 0.0) || !self.g.is_finite() || !self.kappa.is_finite() {
            return bad("geometry constants must be finite and positive");
        }
        if self.drag.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("drag coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.g / 4.0
    }

    /// Rows of the linear map from rotor thrusts to `(T, μx, μy, μz)`.
    pub fn allocation_matrix(&self) -> [[f64; 4]; 4] {
        let beta = self.arm_angle_deg.to_radians();
        let lx = self.arm_length * beta.sin();
        let ly = self.arm_length * beta.cos();
        let k = self.kappa;
        [
            [1.0, 1.0, 1.0, 1.0],
            [-lx, -lx, lx, lx],
            [-ly, ly, ly, -ly],
            [-k, k, -k, k],
        ]
    }

    /// Inverse of [`Self::allocation_matrix`] in closed form.
    pub fn allocation_inverse(&self) -> [[f64; 4]; 4] {
        let beta = self.arm_angle_deg.to_radians();
        let lx = self.arm_length * beta.sin();
        let ly = self.arm_length * beta.cos();
        let k = self.kappa;
        // columns: T, μx, μy, μz
        [
            [0.25, -0.25 / lx, -0.25 / ly, -0.25 / k],
            [0.25, -0.25 / lx, 0.25 / ly, 0.25 / k],
            [0.25, 0.25 / lx, 0.25 / ly, -0.25 / k],
            [0.25, 0.25 / lx, -0.25 / ly, 0.25 / k],
        ]
    }

    /// Copy with mass, motor constant and drag scaled (model-mismatch rows).
    pub fn perturbed(&self, mass_factor: f64, tau_factor: f64, drag_factor: f64) -> Self {
        let mut p = self.clone();
        p.mass *= mass_factor;
        p.tau_mot *= tau_factor;
        for d in &mut p.drag {
            *d *= drag_factor;
        }
        p
    }
}

/// External force (world frame) and torque (body frame).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Disturbance {
    pub f_ext: [f64; 3],
    pub mu_ext: [f64; 3],
}

impl Disturbance {
    pub fn force(f: [f64; 3]) -> Self {
        Self {
            f_ext: f,
            mu_ext: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f_ext.iter().chain(&self.mu_ext).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadState<T> {
    pub x: Vec3<T>,
    pub v: Vec3<T>,
    pub q: Quat<T>,
    pub omega: Vec3<T>,
    pub thrusts: [T; 4],
}

impl<T: Real> QuadState<T> {
    /// At rest at `x` with identity attitude and hover rotor thrusts.
    pub fn hover_at(x: [f64; 3], params: &QuadParams) -> Self {
        let u = T::cst(params.hover_thrust());
        Self {
            x: Vec3::from_f64(x),
            v: Vec3::zeros(),
            q: Quat::identity(),
            omega: Vec3::zeros(),
            thrusts: [u; 4],
        }
    }

    pub fn from_f64(s: &QuadState<f64>) -> Self {
        Self {
            x: Vec3::from_f64(s.x.to_array()),
            v: Vec3::from_f64(s.v.to_array()),
            q: Quat::from_f64(s.q.to_f64()),
            omega: Vec3::from_f64(s.omega.to_array()),
            thrusts: s.thrusts.map(T::cst),
        }
    }

    pub fn to_f64(&self) -> QuadState<f64> {
        QuadState {
            x: Vec3::from_f64(self.x.to_f64()),
            v: Vec3::from_f64(self.v.to_f64()),
            q: Quat::from_f64(self.q.to_f64()),
            omega: Vec3::from_f64(self.omega.to_f64()),
            thrusts: self.thrusts.map(|u| u.value()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.v.is_finite()
            && self.omega.is_finite()
            && self.q.to_f64().iter().all(|v| v.is_finite())
            && self.thrusts.iter().all(|u| u.value().is_finite())
    }

    fn axpy(&self, h: f64, d: &StateDerivative<T>) -> Self {
        Self {
            x: self.x + d.dx * h,
            v: self.v + d.dv * h,
            q: self.q.add(d.dq.scale(h)),
            omega: self.omega + d.domega * h,
            thrusts: std::array::from_fn(|i| self.thrusts[i] + d.dthrusts[i] * h),
        }
    }
}

impl QuadState<f64> {
    /// Flatten to `[x, v, q, Ω, thrusts]` (17 values).
    pub fn to_vec(&self) -> [f64; 17] {
        let mut out = [0.0; 17];
        out[0..3].copy_from_slice(&self.x.to_array());
        out[3..6].copy_from_slice(&self.v.to_array());
        out[6..10].copy_from_slice(&self.q.to_f64());
        out[10..13].copy_from_slice(&self.omega.to_array());
        out[13..17].copy_from_slice(&self.thrusts);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative<T> {
    pub dx: Vec3<T>,
    pub dv: Vec3<T>,
    pub dq: Quat<T>,
    pub domega: Vec3<T>,
    pub dthrusts: [T; 4],
}

impl<T: Real> StateDerivative<T> {
    fn combine(k1: &Self, k2: &Self, k3: &Self, k4: &Self) -> Self {
        let c = |a: T, b: T, c: T, d: T| (a + (b + c) * 2.0 + d) / 6.0;
        let cv = |a: Vec3<T>, b: Vec3<T>, cc: Vec3<T>, d: Vec3<T>| {
            Vec3::new(c(a.x, b.x, cc.x, d.x), c(a.y, b.y, cc.y, d.y), c(a.z, b.z, cc.z, d.z))
        };
        Self {
            dx: cv(k1.dx, k2.dx, k3.dx, k4.dx),
            dv: cv(k1.dv, k2.dv, k3.dv, k4.dv),
            dq: Quat::new(
                c(k1.dq.w, k2.dq.w, k3.dq.w, k4.dq.w),
                c(k1.dq.x, k2.dq.x, k3.dq.x, k4.dq.x),
                c(k1.dq.y, k2.dq.y, k3.dq.y, k4.dq.y),
                c(k1.dq.z, k2.dq.z, k3.dq.z, k4.dq.z),
            ),
            domega: cv(k1.domega, k2.domega, k3.domega, k4.domega),
            dthrusts: std::array::from_fn(|i| {
                c(k1.dthrusts[i], k2.dthrusts[i], k3.dthrusts[i], k4.dthrusts[i])
            }),
        }
    }
}

/// Collective thrust and body torques produced by the rotor thrusts.
pub fn allocation_map<T: Real>(thrusts: &[T; 4], params: &QuadParams) -> (T, Vec3<T>) {
    let b = params.allocation_matrix();
    let row = |r: &[f64; 4]| {
        thrusts[0] * r[0] + thrusts[1] * r[1] + thrusts[2] * r[2] + thrusts[3] * r[3]
    };
    (row(&b[0]), Vec3::new(row(&b[1]), row(&b[2]), row(&b[3])))
}

/// Linear body-frame drag `-R D Rᵀ v`.
pub fn drag_force<T: Real>(v: Vec3<T>, q: Quat<T>, params: &QuadParams) -> Vec3<T> {
    let r = q.to_rotation();
    let vb = r.tr_mul_vec(v);
    let fb = vb.hadamard(Vec3::from_f64(params.drag));
    -r.mul_vec(fb)
}

/// Right-hand side of the continuous-time model.
pub fn continuous_derivative<T: Real>(
    state: &QuadState<T>,
    cmd_thrusts: &[T; 4],
    dist: &Disturbance,
    params: &QuadParams,
    drag_enabled: bool,
) -> Result<StateDerivative<T>> {
    check_inputs(state, cmd_thrusts, dist)?;
    let norm = state.q.norm().value();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::QuaternionNorm { norm });
    }
    Ok(derivative_unchecked(state, cmd_thrusts, dist, params, drag_enabled))
}

fn check_inputs<T: Real>(state: &QuadState<T>, cmd: &[T; 4], dist: &Disturbance) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::NonFinite { what: "state" });
    }
    if cmd.iter().any(|u| !u.value().is_finite()) {
        return Err(Error::NonFinite { what: "thrust command" });
    }
    if !dist.is_finite() {
        return Err(Error::NonFinite { what: "disturbance" });
    }
    Ok(())
}

fn derivative_unchecked<T: Real>(
    state: &QuadState<T>,
    cmd: &[T; 4],
    dist: &Disturbance,
    params: &QuadParams,
    drag_enabled: bool,
) -> StateDerivative<T> {
    // RK4 stages see slightly non-unit quaternions; the thrust axis uses the
    // normalized attitude.
    let qn = state.q.normalized();
    let (thrust, mu) = allocation_map(&state.thrusts, params);
    let z_b = qn.to_rotation().column(2);
    let mut force = z_b.scale(thrust) + Vec3::from_f64(dist.f_ext);
    if drag_enabled {
        force += drag_force(state.v, qn, params);
    }
    let mut dv = force / params.mass;
    dv.z = dv.z - params.g;

    let w = state.omega;
    let dq = state.q.mul(Quat::new(T::zero(), w.x, w.y, w.z)).scale(0.5);

    let j = Vec3::from_f64(params.inertia);
    let jw = w.hadamard(j);
    let tau = mu + Vec3::from_f64(dist.mu_ext) - w.cross(jw);
    let domega = Vec3::new(tau.x / params.inertia[0], tau.y / params.inertia[1], tau.z / params.inertia[2]);

    let inv_tau = 1.0 / params.tau_mot;
    StateDerivative {
        dx: state.v,
        dv,
        dq,
        domega,
        dthrusts: std::array::from_fn(|i| (cmd[i] - state.thrusts[i]) * inv_tau),
    }
}

/// One classical RK4 step. The quaternion is renormalized and the rotor
/// thrust states are clamped to the actuator box afterwards.
pub fn rk4_step<T: Real>(
    state: &QuadState<T>,
    cmd: &[T; 4],
    dist: &Disturbance,
    params: &QuadParams,
    dt: f64,
    drag_enabled: bool,
) -> Result<QuadState<T>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let k1 = continuous_derivative(state, cmd, dist, params, drag_enabled)?;
    let k2 = derivative_unchecked(&state.axpy(dt * 0.5, &k1), cmd, dist, params, drag_enabled);
    let k3 = derivative_unchecked(&state.axpy(dt * 0.5, &k2), cmd, dist, params, drag_enabled);
    let k4 = derivative_unchecked(&state.axpy(dt, &k3), cmd, dist, params, drag_enabled);
    let mut next = state.axpy(dt, &StateDerivative::combine(&k1, &k2, &k3, &k4));
    next.q = next.q.normalized();
    for u in &mut next.thrusts {
        if u.value() < params.u_min {
            *u = T::cst(params.u_min);
        } else if u.value() > params.u_max {
            *u = T::cst(params.u_max);
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> QuadParams {
        QuadParams::default()
    }

    fn no_dist() -> Disturbance {
        Disturbance::default()
    }

    #[test]
    fn hover_derivative_is_zero() {
        let p = params();
        let s = QuadState::<f64>::hover_at([0.0; 3], &p);
        let (t, _) = allocation_map(&s.thrusts, &p);
        assert_abs_diff_eq!(t, 7.0632, epsilon = 1e-12);
        let d = continuous_derivative(&s, &s.thrusts, &no_dist(), &p, true).unwrap();
        assert_abs_diff_eq!(d.dv.max_abs(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.domega.max_abs(), 0.0, epsilon = 1e-14);
        assert_eq!(d.dq.to_f64(), [0.0; 4]);
        assert!(d.dthrusts.iter().all(|&x| x == 0.0));
        let cmd = [2.0; 4];
        let d = continuous_derivative(&s, &cmd, &no_dist(), &p, true).unwrap();
        let expect = (2.0 - p.hover_thrust()) / p.tau_mot;
        assert!(d.dthrusts.iter().all(|&x| (x - expect).abs() < 1e-12));
    }

    #[test]
    fn free_fall() {
        let p = params();
        let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
        s.thrusts = [0.0; 4];
        let d = continuous_derivative(&s, &[0.0; 4], &no_dist(), &p, true).unwrap();
        assert_eq!(d.dv.to_array(), [0.0, 0.0, -9.81]);
        let next = rk4_step(&s, &[0.0; 4], &no_dist(), &p, 0.01, false).unwrap();
        assert_abs_diff_eq!(next.v.z, -0.0981, epsilon = 1e-15);
        assert_abs_diff_eq!(next.x.z, -4.905e-4, epsilon = 1e-15);
    }

    #[test]
    fn principal_axis_spin_has_no_gyroscopic_torque() {
        let p = params();
        let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
        s.omega = Vec3::new(1.0, 0.0, 0.0);
        let d = continuous_derivative(&s, &s.thrusts, &no_dist(), &p, false).unwrap();
        assert_eq!(d.domega.to_array(), [0.0; 3]);
    }

    #[test]
    fn dq_is_orthogonal_to_q() {
        let p = params();
        let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
        s.q = Quat::from_axis_angle(Vec3::new(0.0, 0.6, 0.8), 0.7);
        s.omega = Vec3::new(3.0, -2.0, 5.0);
        let d = continuous_derivative(&s, &s.thrusts, &no_dist(), &p, true).unwrap();
        assert_abs_diff_eq!(d.dq.dot(s.q), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn drag_examples() {
        let p = params();
        let id = Quat::<f64>::identity();
        assert_eq!(drag_force(Vec3::zeros(), id, &p).to_array(), [0.0; 3]);
        let f = drag_force(Vec3::new(1.0, 0.0, 0.0), id, &p);
        assert_abs_diff_eq!((f - Vec3::new(-0.3, 0.0, 0.0)).max_abs(), 0.0, epsilon = 1e-15);

        // 90° yaw: compose R·D·Rᵀ by components
        let p2 = QuadParams {
            drag: [0.3, 0.5, 0.15],
            ..p
        };
        let yaw = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let d = [0.3, 0.5, 0.15];
        let v = [1.0, 0.0, 0.0];
        let mut expect = [0.0; 3];
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    expect[i] -= r[i][k] * d[k] * r[j][k] * v[j];
                }
            }
        }
        let f = drag_force(Vec3::from_f64(v), yaw, &p2);
        for i in 0..3 {
            assert_abs_diff_eq!(f.to_array()[i], expect[i], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(f.x, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn allocation_examples() {
        let p = params();
        let (t, mu) = allocation_map(&[1.7658; 4], &p);
        assert_abs_diff_eq!(t, 7.0632, epsilon = 1e-12);
        assert_abs_diff_eq!(mu.max_abs(), 0.0, epsilon = 1e-15);
        let (_, mu) = allocation_map(&[0.0, 0.0, 1.0, 1.0], &p);
        assert_abs_diff_eq!(mu.x, 2.0 * 0.14 * 56f64.to_radians().sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(mu.x, 0.2321, epsilon = 1e-4);
        let (_, mu) = allocation_map(&[0.0, 1.0, 0.0, 1.0], &p);
        assert_abs_diff_eq!(mu.z, 0.032, epsilon = 1e-15);
    }

    #[test]
    fn allocation_inverse_is_inverse() {
        let p = params();
        let b = p.allocation_matrix();
        let bi = p.allocation_inverse();
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..4).map(|k| b[i][k] * bi[k][j]).sum();
                assert_abs_diff_eq!(s, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params();
        let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
        s.q = Quat::new(1.01, 0.0, 0.0, 0.0);
        assert!(matches!(
            continuous_derivative(&s, &[1.0; 4], &no_dist(), &p, true),
            Err(Error::QuaternionNorm { .. })
        ));
        let s = QuadState::<f64>::hover_at([f64::NAN, 0.0, 0.0], &p);
        assert!(matches!(
            continuous_derivative(&s, &[1.0; 4], &no_dist(), &p, true),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn motor_lag_step_response() {
        let p = params();
        let mut s = QuadState::<f64>::hover_at([0.0; 3], &p);
        s.thrusts = [0.0; 4];
        let cmd = [p.u_max; 4];
        let dt = 0.01;
        let steps = (p.tau_mot / dt).round() as usize;
        for _ in 0..steps {
            s = rk4_step(&s, &cmd, &no_dist(), &p, dt, false).unwrap();
        }
        let frac = s.thrusts[0] / p.u_max;
        assert!((frac - 0.632).abs() < 0.005, "reached {frac}");
    }
}
