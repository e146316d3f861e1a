//! Closed-loop simulation of plant and controller.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::controller::{flat_attitude, Allocate, Gains, ReferenceState};
use crate::dynamics::{rk4_step, Disturbance, QuadParams, QuadState};
use crate::math::{Real, Vec3};
use crate::trajectory::ReferenceTrack;
use crate::youla::{ngtc_step, AugmentationConfig, NgtcMemory, NgtcOutput, NominalModel, RenEval};
use crate::{Error, Result};

/// Simulated vehicle. `params` may differ from the controller's nominal model.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub params: QuadParams,
    pub drag: bool,
    pub dt: f64,
}

/// State consistent with the flat reference at its first sample: position,
/// velocity, attitude and body rates on the reference, rotor thrusts at the
/// required wrench.
pub fn flat_initial_state(track: &ReferenceTrack, params: &QuadParams) -> QuadState<f64> {
    flat_state(track.at(0), params)
}

/// Vehicle state that realizes the flat reference `r` exactly.
pub fn flat_state(r: &ReferenceState, params: &QuadParams) -> QuadState<f64> {
    let (t, q, omega) = flat_attitude(r, params);
    let j = Vec3::from_f64(params.inertia);
    let mu = omega.cross(omega.hadamard(j));
    let w = [t, mu.x, mu.y, mu.z];
    let binv = params.allocation_inverse();
    let thrusts = std::array::from_fn(|i| {
        let u: f64 = (0..4).map(|k| binv[i][k] * w[k]).sum();
        u.clamp(params.u_min, params.u_max)
    });
    QuadState {
        x: Vec3::from_f64(r.x),
        v: Vec3::from_f64(r.v),
        q,
        omega,
        thrusts,
    }
}

/// Ranges of the per-episode disturbance draw.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceRanges {
    /// Upper bound of the constant force magnitude, N.
    pub force_cap: f64,
    /// Upper bound of the constant torque magnitude, N·m.
    pub torque_cap: f64,
    /// Per-step Gaussian noise, as a fraction of the constant magnitude.
    pub noise: f64,
}

impl Default for DisturbanceRanges {
    fn default() -> Self {
        Self {
            force_cap: 20.0,
            torque_cap: 0.1,
            noise: 0.2,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Constant force and torque with uniformly random directions and
/// magnitudes, plus per-step Gaussian perturbations.
pub fn episode_disturbances(ranges: &DisturbanceRanges, steps: usize, seed: u64) -> Vec<Disturbance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
    let fdir = unit_vector(&mut rng);
    let fmag = ranges.force_cap * unit.sample(&mut rng);
    let tdir = unit_vector(&mut rng);
    let tmag = ranges.torque_cap * unit.sample(&mut rng);
    (0..steps)
        .map(|_| {
            let mut noisy = |dir: [f64; 3], mag: f64| -> [f64; 3] {
                std::array::from_fn(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    dir[i] * mag + ranges.noise * mag * z
                })
            };
            Disturbance {
                f_ext: noisy(fdir, fmag),
                mu_ext: noisy(tdir, tmag),
            }
        })
        .collect()
}

/// How a rollout ended.
#[derive(Debug)]
pub struct RolloutEnd {
    /// Control steps whose plant update completed.
    pub completed: usize,
    pub error: Option<Error>,
}

/// Shared inputs of a closed-loop run.
pub struct LoopSetup<'a, R, A> {
    pub track: &'a ReferenceTrack,
    pub plant: &'a Plant,
    pub nominal: &'a NominalModel,
    pub gains: &'a Gains,
    pub ren: Option<&'a R>,
    pub aug: &'a AugmentationConfig,
    pub allocator: &'a A,
}

/// Run the closed loop for `steps` control periods. `observe` sees the
/// controller output for step `k`, the disturbance applied and the plant
/// state after the step; returning `false` stops the run.
pub fn rollout<T, R, A, F>(
    setup: &LoopSetup<'_, R, A>,
    init: QuadState<T>,
    steps: usize,
    disturbances: &[Disturbance],
    mut observe: F,
) -> RolloutEnd
where
    T: Real,
    R: RenEval<T>,
    A: Allocate<T>,
    F: FnMut(usize, &NgtcOutput<T>, &Disturbance, &QuadState<T>) -> bool,
{
    let ren_states = setup.ren.map_or(0, |r| r.dims().n);
    let mut mem = NgtcMemory::new(ren_states);
    let mut state = init;
    for k in 0..steps {
        let dist = disturbances.get(k).copied().unwrap_or_default();
        let step = |state: &QuadState<T>, mem: &mut NgtcMemory<T>| -> Result<(NgtcOutput<T>, QuadState<T>)> {
            let out = ngtc_step(
                state,
                setup.track,
                k,
                setup.ren,
                setup.aug,
                setup.nominal,
                setup.gains,
                mem,
                setup.allocator,
            )?;
            let next = rk4_step(
                state,
                &out.command.rotor_thrusts,
                &dist,
                &setup.plant.params,
                setup.plant.dt,
                setup.plant.drag,
            )?;
            if !next.is_finite() {
                return Err(Error::NonFinite { what: "plant state" });
            }
            Ok((out, next))
        };
        match step(&state, &mut mem) {
            Ok((out, next)) => {
                state = next;
                if !observe(k, &out, &dist, &state) {
                    return RolloutEnd {
                        completed: k + 1,
                        error: None,
                    };
                }
            }
            Err(e) => {
                return RolloutEnd {
                    completed: k,
                    error: Some(e),
                }
            }
        }
    }
    RolloutEnd {
        completed: steps,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::QpAllocator;
    use crate::ren::RenWeights;
    use crate::trajectory::TrajectorySpec;

    #[test]
    fn dfbc_recovers_from_offset() {
        let p = QuadParams::default();
        let track = ReferenceTrack::build(&TrajectorySpec::hover([0.0; 3], 3.0), 0.01);
        let plant = Plant {
            params: p.clone(),
            drag: true,
            dt: 0.01,
        };
        let setup = LoopSetup::<RenWeights, _> {
            track: &track,
            plant: &plant,
            nominal: &NominalModel::new(p.clone(), 0.01),
            gains: &Gains::default(),
            ren: None,
            aug: &AugmentationConfig::default(),
            allocator: &QpAllocator,
        };
        let mut init = QuadState::hover_at([1.0, 0.0, 0.0], &p);
        init.x = Vec3::new(1.0, 0.0, 0.0);
        let mut last = init;
        let end = rollout(&setup, init, 300, &[], |_, _, _, s| {
            last = *s;
            true
        });
        assert!(end.error.is_none());
        assert!(last.x.norm() < 0.01, "final offset {:?}", last.x);
    }

    #[test]
    fn disturbance_draw_is_bounded_and_seeded() {
        let r = DisturbanceRanges {
            noise: 0.0,
            ..Default::default()
        };
        let a = episode_disturbances(&r, 5, 3);
        assert_eq!(a, episode_disturbances(&r, 5, 3));
        let f = a[0].f_ext;
        assert!((f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt() <= 20.0);
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
