//! Differential-flatness based geometric tracking controller (DFBC).
//!
//! PD position loop, thrust/attitude construction, jerk feedforward on the
//! body rates, tilt-prioritized attitude control, body-rate to torque
//! inversion and box-constrained control allocation.

use crate::dynamics::{QuadParams, QuadState};
use crate::math::{Mat3, Quat, Real, Vec3};

pub mod allocation;

pub use allocation::{allocate, kkt_residual, Allocate, AllocationResult, QpAllocator, SmoothAllocator};

/// Flat-output reference at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceState {
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub a: [f64; 3],
    pub j: [f64; 3],
    pub s: [f64; 3],
    pub psi: f64,
    pub dpsi: f64,
}

impl ReferenceState {
    pub fn hover(x: [f64; 3]) -> Self {
        Self {
            x,
            v: [0.0; 3],
            a: [0.0; 3],
            j: [0.0; 3],
            s: [0.0; 3],
            psi: 0.0,
            dpsi: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.v, self.a, self.j, self.s]
            .iter()
            .flatten()
            .chain([&self.psi, &self.dpsi])
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    pub kx: [f64; 3],
    pub kv: [f64; 3],
    pub kq_xy: f64,
    pub kq_z: f64,
    pub komega: [f64; 3],
    /// Allocation weights on `(T, μx, μy, μz)`.
    pub wc: [f64; 4],
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kx: [18.0; 3],
            kv: [8.0; 3],
            kq_xy: 150.0,
            kq_z: 3.0,
            komega: [20.0, 20.0, 8.0],
            wc: [1e-3, 10.0, 10.0, 0.1],
        }
    }
}

impl Gains {
    pub fn validate(&self) -> crate::Result<()> {
        let all = self
            .kx
            .iter()
            .chain(&self.kv)
            .chain(&self.komega)
            .chain(&self.wc)
            .chain([&self.kq_xy, &self.kq_z]);
        for v in all {
            if !(v.is_finite() && *v > 0.0) {
                return Err(crate::Error::InvalidParameter(format!(
                    "controller gains must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Singularity and saturation events raised during one controller step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags(pub u8);

impl Flags {
    pub const FREEFALL_HOLD: Flags = Flags(1);
    pub const GIMBAL_HOLD: Flags = Flags(1 << 1);
    pub const FEEDFORWARD_OFF: Flags = Flags(1 << 2);
    pub const TILT_AMBIGUOUS: Flags = Flags(1 << 3);
    pub const ALLOCATION_DEGRADED: Flags = Flags(1 << 4);
    pub const SATURATED: Flags = Flags(1 << 5);

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: Flags) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Values held across steps for the singularity fallbacks.
#[derive(Clone, Copy, Debug)]
pub struct ControllerMemory<T> {
    pub z_des: Vec3<T>,
    pub x_b: Vec3<T>,
}

impl<T: Real> Default for ControllerMemory<T> {
    fn default() -> Self {
        Self {
            z_des: Vec3::unit_z(),
            x_b: Vec3::new(T::cst(1.0), T::zero(), T::zero()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttitudeSetpoint<T> {
    pub t_des: T,
    pub q_des: Quat<T>,
    pub omega_ff: Vec3<T>,
    pub dt_des: T,
}

#[derive(Clone, Copy, Debug)]
pub struct ControlCommand<T> {
    pub rotor_thrusts: [T; 4],
    pub setpoint: AttitudeSetpoint<T>,
    pub omega_cmd: Vec3<T>,
    pub mu_des: Vec3<T>,
    pub a_cmd: Vec3<T>,
    pub flags: Flags,
}

pub fn pd_acceleration<T: Real>(state: &QuadState<T>, r: &ReferenceState, gains: &Gains) -> Vec3<T> {
    let ex = Vec3::from_f64(r.x) - state.x;
    let ev = Vec3::from_f64(r.v) - state.v;
    ex.hadamard(Vec3::from_f64(gains.kx)) + ev.hadamard(Vec3::from_f64(gains.kv)) + Vec3::from_f64(r.a)
}

/// Desired collective thrust and attitude for a commanded acceleration.
///
/// Uses `T_des z_des = m (a_cmd + g e3)` and the heading reference axis
/// `y_C = (-sin ψ, cos ψ, 0)`, so hover at ψ = 0 gives the identity.
pub fn thrust_and_attitude<T: Real>(
    a_cmd: Vec3<T>,
    psi: f64,
    params: &QuadParams,
    memory: &mut ControllerMemory<T>,
    flags: &mut Flags,
) -> (T, Mat3<T>) {
    let mut f = a_cmd;
    f.z = f.z + params.g;
    let n = f.norm();
    let (z_des, t_des) = if n.value() < 0.1 {
        flags.insert(Flags::FREEFALL_HOLD);
        let z = memory.z_des;
        let t = f.dot(z) * params.mass;
        (z, if t.value() < 0.0 { T::zero() } else { t })
    } else {
        (f.scale(T::cst(1.0) / n), n * params.mass)
    };
    let y_c = Vec3::<T>::from_f64([-psi.sin(), psi.cos(), 0.0]);
    let c = y_c.cross(z_des);
    let cn = c.norm();
    let x_b = if cn.value() < 1e-6 {
        flags.insert(Flags::GIMBAL_HOLD);
        let p = memory.x_b - z_des.scale(memory.x_b.dot(z_des));
        let pn = p.norm();
        if pn.value() < 1e-9 {
            memory.x_b
        } else {
            p.scale(T::cst(1.0) / pn)
        }
    } else {
        c.scale(T::cst(1.0) / cn)
    };
    let y_b = z_des.cross(x_b);
    memory.z_des = z_des;
    memory.x_b = x_b;
    (t_des, Mat3::from_columns(x_b, y_b, z_des))
}

/// Body-rate feedforward and thrust rate from the reference jerk.
pub fn angular_velocity_reference<T: Real>(
    r: &ReferenceState,
    r_des: &Mat3<T>,
    t_des: T,
    params: &QuadParams,
    flags: &mut Flags,
) -> (Vec3<T>, T) {
    if t_des.value() < 0.1 {
        flags.insert(Flags::FEEDFORWARD_OFF);
        return (Vec3::zeros(), T::zero());
    }
    let h = r_des.tr_mul_vec(Vec3::from_f64(r.j) * params.mass);
    let inv_t = T::cst(1.0) / t_des;
    let omega = Vec3::new(-h.y * inv_t, h.x * inv_t, r_des.rows[2][2] * r.dpsi);
    (omega, h.z)
}

/// Tilt-prioritized attitude feedback on body rates.
///
/// The error `q_e = q⁻¹ ⊗ q_des` is split into a yaw rotation about body z
/// and a remaining tilt `q_red = q_e ⊗ q_yaw⁻¹`, each with its own gain.
pub fn tilt_prioritized_rates<T: Real>(q: Quat<T>, q_des: Quat<T>, gains: &Gains, flags: &mut Flags) -> Vec3<T> {
    let qe = q.conj().mul(q_des);
    let n2 = qe.w * qe.w + qe.z * qe.z;
    let (q_yaw, q_red) = if n2.value() < 1e-12 {
        flags.insert(Flags::TILT_AMBIGUOUS);
        (Quat::identity(), qe)
    } else {
        let inv = T::cst(1.0) / n2.sqrt();
        let q_yaw = Quat::new(qe.w * inv, T::zero(), T::zero(), qe.z * inv);
        (q_yaw, qe.mul(q_yaw.conj()))
    };
    let sgn = |v: T| if v.value() < 0.0 { -1.0 } else { 1.0 };
    let kxy = 2.0 * gains.kq_xy * sgn(q_red.w);
    let kz = 2.0 * gains.kq_z * sgn(qe.w);
    Vec3::new(q_red.x * kxy, q_red.y * kxy, q_yaw.z * kz)
}

/// `μ = J K_Ω (ω_cmd − Ω) + Ω × JΩ`
pub fn rates_to_torque<T: Real>(omega_cmd: Vec3<T>, state: &QuadState<T>, gains: &Gains, params: &QuadParams) -> Vec3<T> {
    let j = Vec3::from_f64(params.inertia);
    let k = Vec3::from_f64(gains.komega);
    let w = state.omega;
    (omega_cmd - w).hadamard(k).hadamard(j) + w.cross(w.hadamard(j))
}

/// One full DFBC step with an additive acceleration augmentation.
///
/// The attitude feedback enters the rate command scaled by `K_Ω⁻¹`, so the
/// torque is `J (Ω_fb + K_Ω (Ω_ff − Ω)) + Ω × JΩ`: a PD law with stiffness
/// `k_q` and damping `K_Ω` around the attitude error.
pub fn dfbc_step<T: Real, A: Allocate<T>>(
    state: &QuadState<T>,
    r: &ReferenceState,
    a_aug: Vec3<T>,
    gains: &Gains,
    params: &QuadParams,
    memory: &mut ControllerMemory<T>,
    allocator: &A,
) -> ControlCommand<T> {
    let mut flags = Flags::default();
    let a_cmd = pd_acceleration(state, r, gains) + a_aug;
    let (t_des, r_des) = thrust_and_attitude(a_cmd, r.psi, params, memory, &mut flags);
    let q_des = Quat::from_rotation(&r_des);
    let (omega_ff, dt_des) = angular_velocity_reference(r, &r_des, t_des, params, &mut flags);
    let fb = tilt_prioritized_rates(state.q, q_des, gains, &mut flags);
    let omega_cmd = omega_ff + fb.hadamard(Vec3::from_f64(gains.komega.map(|k| 1.0 / k)));
    let mu_des = rates_to_torque(omega_cmd, state, gains, params);
    let alloc = allocator.allocate(t_des, mu_des, gains, params);
    flags.insert(alloc.flags);
    ControlCommand {
        rotor_thrusts: alloc.thrusts,
        setpoint: AttitudeSetpoint {
            t_des,
            q_des,
            omega_ff,
            dt_des,
        },
        omega_cmd,
        mu_des,
        a_cmd,
        flags,
    }
}

/// Attitude, body rates and collective thrust implied by a flat reference.
pub fn flat_attitude(r: &ReferenceState, params: &QuadParams) -> (f64, Quat<f64>, Vec3<f64>) {
    let mut mem = ControllerMemory::default();
    let mut flags = Flags::default();
    let (t, rot) = thrust_and_attitude(Vec3::from_f64(r.a), r.psi, params, &mut mem, &mut flags);
    let (omega, _) = angular_velocity_reference(r, &rot, t, params, &mut flags);
    (t, Quat::from_rotation(&rot), omega)
}
