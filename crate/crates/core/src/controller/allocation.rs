//! Weighted least-squares control allocation under rotor thrust bounds.
//!
//! Solves `min (B u − w)ᵀ W (B u − w)` subject to `u_min ≤ u ≤ u_max` with a
//! primal active-set method. The training loop uses a smooth surrogate
//! instead, see [`SmoothAllocator`].

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use super::{Flags, Gains};
use crate::dynamics::QuadParams;
use crate::math::{Real, Vec3};

const MAX_ITERATIONS: usize = 50;

#[derive(Clone, Copy, Debug)]
pub struct AllocationResult<T> {
    pub thrusts: [T; 4],
    pub flags: Flags,
}

/// Maps a wrench demand `(T, μ)` to rotor thrusts.
pub trait Allocate<T> {
    fn allocate(&self, t_des: T, mu_des: Vec3<T>, gains: &Gains, params: &QuadParams) -> AllocationResult<T>;
}

/// Exact box-constrained allocation.
#[derive(Clone, Copy, Debug, Default)]
pub struct QpAllocator;

impl Allocate<f64> for QpAllocator {
    fn allocate(&self, t_des: f64, mu_des: Vec3<f64>, gains: &Gains, params: &QuadParams) -> AllocationResult<f64> {
        allocate(t_des, mu_des, gains, params)
    }
}

/// Unconstrained inverse, a common-mode shift that moves the rotor commands
/// back into the thrust box where possible, then a softplus clamp.
///
/// The shift changes only the collective thrust, so torque authority is kept
/// the way the exact allocator keeps it (its thrust weight is the smallest).
#[derive(Clone, Copy, Debug)]
pub struct SmoothAllocator {
    /// Sharpness of the soft clamp, 1/N.
    pub k: f64,
}

impl Default for SmoothAllocator {
    fn default() -> Self {
        Self { k: 10.0 }
    }
}

impl<T: Real> Allocate<T> for SmoothAllocator {
    fn allocate(&self, t_des: T, mu_des: Vec3<T>, _gains: &Gains, params: &QuadParams) -> AllocationResult<T> {
        let binv = params.allocation_inverse();
        let w = [t_des, mu_des.x, mu_des.y, mu_des.z];
        let (lo, hi, k) = (params.u_min, params.u_max, self.k);
        let mut flags = Flags::default();
        let sp = |z: T| (z * k).softplus() / k;
        let raw: [T; 4] = std::array::from_fn(|i| (0..4).fold(T::zero(), |acc, j| acc + w[j] * binv[i][j]));
        let pick = |better: fn(f64, f64) -> bool| raw.iter().copied().reduce(|a, b| if better(b.value(), a.value()) { b } else { a });
        let top = pick(|b, a| b > a).expect("four rotors");
        let bottom = pick(|b, a| b < a).expect("four rotors");
        let shift = sp(-(bottom - lo)) - sp(top - hi);
        let thrusts = raw.map(|u| {
            if u.value() < lo || u.value() > hi {
                flags.insert(Flags::SATURATED);
            }
            let u = u + shift;
            sp(u - lo) - sp(u - hi) + lo
        });
        AllocationResult { thrusts, flags }
    }
}

fn problem(t_des: f64, mu: Vec3<f64>, gains: &Gains, params: &QuadParams) -> (Matrix4<f64>, Vector4<f64>) {
    let b = Matrix4::from_fn(|i, j| params.allocation_matrix()[i][j]);
    let w = Matrix4::from_diagonal(&Vector4::from(gains.wc));
    let demand = Vector4::new(t_des, mu.x, mu.y, mu.z);
    let bt_w = b.transpose() * w;
    (bt_w * b, -(bt_w * demand))
}

/// Box-constrained weighted least-squares allocation.
///
/// When the unconstrained solution `B⁻¹ w` lies inside the box it is
/// returned unchanged. Otherwise the active-set iteration runs for at most
/// 50 iterations before falling back to the clipped inverse and raising
/// [`Flags::ALLOCATION_DEGRADED`].
pub fn allocate(t_des: f64, mu_des: Vec3<f64>, gains: &Gains, params: &QuadParams) -> AllocationResult<f64> {
    let binv = params.allocation_inverse();
    let w = [t_des, mu_des.x, mu_des.y, mu_des.z];
    let u_ls: [f64; 4] = std::array::from_fn(|i| (0..4).map(|j| binv[i][j] * w[j]).sum());
    let (lo, hi) = (params.u_min, params.u_max);
    if u_ls.iter().all(|u| (lo..=hi).contains(u)) {
        return AllocationResult {
            thrusts: u_ls,
            flags: Flags::default(),
        };
    }

    let clipped = u_ls.map(|u| u.clamp(lo, hi));
    let mut flags = Flags::SATURATED;
    match active_set(&clipped, t_des, mu_des, gains, params) {
        Some(u) => AllocationResult { thrusts: u, flags },
        None => {
            log::warn!("allocation did not converge, using clipped inverse");
            flags.insert(Flags::ALLOCATION_DEGRADED);
            AllocationResult { thrusts: clipped, flags }
        }
    }
}

fn active_set(start: &[f64; 4], t_des: f64, mu: Vec3<f64>, gains: &Gains, params: &QuadParams) -> Option<[f64; 4]> {
    let (h, c) = problem(t_des, mu, gains, params);
    let (lo, hi) = (params.u_min, params.u_max);
    let mut u = Vector4::from(*start);
    // -1: fixed at lower bound, +1: fixed at upper bound, 0: free
    let mut state: [i8; 4] = start.map(|v| {
        if v <= lo {
            -1
        } else if v >= hi {
            1
        } else {
            0
        }
    });
    let tol = 1e-12 * (1.0 + c.amax());

    for _ in 0..MAX_ITERATIONS {
        let free: Vec<usize> = (0..4).filter(|&i| state[i] == 0).collect();
        let mut blocking = None;
        if !free.is_empty() {
            let n = free.len();
            let hff = DMatrix::from_fn(n, n, |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(n, |a, _| {
                let i = free[a];
                -(c[i] + (0..4).filter(|&j| state[j] != 0).map(|j| h[(i, j)] * u[j]).sum::<f64>())
            });
            let target = hff.cholesky()?.solve(&rhs);
            let mut alpha = 1.0;
            for (a, &i) in free.iter().enumerate() {
                let p = target[a] - u[i];
                let step = if p < 0.0 {
                    (lo - u[i]) / p
                } else if p > 0.0 {
                    (hi - u[i]) / p
                } else {
                    continue;
                };
                if step < alpha {
                    alpha = step.max(0.0);
                    blocking = Some((i, if p < 0.0 { -1 } else { 1 }));
                }
            }
            for (a, &i) in free.iter().enumerate() {
                u[i] += alpha * (target[a] - u[i]);
            }
        }
        if let Some((i, side)) = blocking {
            u[i] = if side < 0 { lo } else { hi };
            state[i] = side;
            continue;
        }
        // stationary on the current face: check multiplier signs
        let g = h * u + c;
        let worst = (0..4)
            .filter_map(|i| match state[i] {
                -1 if g[i] < -tol => Some((i, -g[i])),
                1 if g[i] > tol => Some((i, g[i])),
                _ => None,
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, _)) => state[i] = 0,
            None => return Some(u.into()),
        }
    }
    None
}

/// Largest violation of the KKT conditions of the allocation problem at `u`.
pub fn kkt_residual(u: &[f64; 4], t_des: f64, mu_des: Vec3<f64>, gains: &Gains, params: &QuadParams) -> f64 {
    let (h, c) = problem(t_des, mu_des, gains, params);
    let g = h * Vector4::from(*u) + c;
    let (lo, hi) = (params.u_min, params.u_max);
    (0..4)
        .map(|i| {
            let infeasible = (lo - u[i]).max(u[i] - hi).max(0.0);
            let stationarity = if (u[i] - lo).abs() <= 1e-9 {
                (-g[i]).max(0.0)
            } else if (u[i] - hi).abs() <= 1e-9 {
                g[i].max(0.0)
            } else {
                g[i].abs()
            };
            infeasible.max(stationarity)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn run(t: f64, mu: [f64; 3]) -> AllocationResult<f64> {
        allocate(t, Vec3::from_f64(mu), &Gains::default(), &QuadParams::default())
    }

    #[test]
    fn hover_is_equal_split() {
        let r = run(7.0632, [0.0; 3]);
        for u in r.thrusts {
            assert_abs_diff_eq!(u, 1.7658, epsilon = 1e-12);
        }
        assert!(r.flags.is_empty());
    }

    #[test]
    fn interior_solution_reproduces_wrench() {
        let p = QuadParams::default();
        let r = run(8.0, [0.01, -0.02, 0.003]);
        let b = p.allocation_matrix();
        let w = [8.0, 0.01, -0.02, 0.003];
        for i in 0..4 {
            let bu: f64 = (0..4).map(|j| b[i][j] * r.thrusts[j]).sum();
            assert_abs_diff_eq!(bu, w[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn thrust_beyond_box_saturates_all_rotors() {
        let r = run(40.0, [0.0; 3]);
        for u in r.thrusts {
            assert_abs_diff_eq!(u, 8.5, epsilon = 1e-12);
        }
        assert!(r.flags.contains(Flags::SATURATED));
    }

    #[test]
    fn large_roll_demand_keeps_torque_over_thrust() {
        let p = QuadParams::default();
        let g = Gains::default();
        let mu = Vec3::new(2.0, 0.0, 0.0);
        let r = allocate(7.0632, mu, &g, &p);
        assert!(r.thrusts.iter().all(|u| (0.0..=8.5).contains(u)));
        assert!(kkt_residual(&r.thrusts, 7.0632, mu, &g, &p) < 1e-8);
        let (_, m) = crate::dynamics::allocation_map(&r.thrusts, &p);
        // roll torque is as large as the box allows, thrust gives way
        assert_abs_diff_eq!(m.x, 4.0 * 8.5 * 0.14 * 56f64.to_radians().sin() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn smooth_allocator_tracks_interior_inverse() {
        let p = QuadParams::default();
        let g = Gains::default();
        let r = SmoothAllocator::default().allocate(7.0632, Vec3::zeros(), &g, &p);
        for u in r.thrusts {
            assert_abs_diff_eq!(u, 1.7658, epsilon = 1e-6);
        }
        // the common-mode shift lands on the bound, where the soft clamp
        // sits ln 2 / k below it
        let r = SmoothAllocator::default().allocate(60.0, Vec3::zeros(), &g, &p);
        for u in r.thrusts {
            assert_abs_diff_eq!(u, 8.5 - 2f64.ln() / 10.0, epsilon = 1e-6);
        }
        assert!(r.flags.contains(Flags::SATURATED));
    }
}
