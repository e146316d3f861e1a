//! Residual-driven augmentation of the DFBC loop.
//!
//! A nominal model predicts the state one step ahead from the previous state
//! and command. The residual between observation and prediction, together
//! with a window of upcoming references, drives a REN whose squashed output
//! is added to the commanded acceleration. With an exact model and no
//! disturbance the residual vanishes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::ad::Var;
use crate::controller::{dfbc_step, Allocate, ControlCommand, ControllerMemory, Gains, ReferenceState};
use crate::dynamics::{rk4_step, Disturbance, QuadParams, QuadState};
use crate::math::{wrap_angle, Real, Vec3};
use crate::ren::{forward_var, RenDims, RenState, RenWeights, WeightGrads};
use crate::trajectory::ReferenceTrack;
use crate::Result;

/// Number of future reference samples fed to the network.
pub const HORIZON: usize = 12;
/// Residual (12) plus `HORIZON` samples of (position, velocity, heading).
pub const INPUT_SIZE: usize = 12 + HORIZON * 7;

/// Fixed input normalization. Residual channels are divided by the size a
/// 5 m/s² (10 rad/s² for rotation) disturbance produces over one 10 ms
/// step; window positions are in m, velocities in units of 10 m/s.
const RESIDUAL_SCALE: [f64; 4] = [2.5e-4, 0.05, 5e-4, 0.1];
const WINDOW_SCALE: [f64; 3] = [1.0, 10.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct NominalModel {
    pub params: QuadParams,
    pub dt: f64,
}

impl NominalModel {
    pub fn new(params: QuadParams, dt: f64) -> Self {
        Self { params, dt }
    }
}

/// One RK4 step of the nominal dynamics: no disturbance, no drag.
pub fn nominal_predict<T: Real>(model: &NominalModel, prev: &QuadState<T>, prev_cmd: &[T; 4]) -> Result<QuadState<T>> {
    rk4_step(prev, prev_cmd, &Disturbance::default(), &model.params, model.dt, false)
}

#[derive(Clone, Copy, Debug)]
pub struct Residual<T> {
    pub e_x: Vec3<T>,
    pub e_v: Vec3<T>,
    /// Rotation vector of `q̂⁻¹ ⊗ q`.
    pub e_att: Vec3<T>,
    pub e_omega: Vec3<T>,
}

impl<T: Real> Residual<T> {
    pub fn zeros() -> Self {
        Self {
            e_x: Vec3::zeros(),
            e_v: Vec3::zeros(),
            e_att: Vec3::zeros(),
            e_omega: Vec3::zeros(),
        }
    }

    pub fn to_array(&self) -> [T; 12] {
        let mut out = [T::zero(); 12];
        for (g, v) in [self.e_x, self.e_v, self.e_att, self.e_omega].iter().enumerate() {
            out[3 * g..3 * g + 3].copy_from_slice(&v.to_array());
        }
        out
    }
}

pub fn compute_residual<T: Real>(observed: &QuadState<T>, predicted: &QuadState<T>) -> Residual<T> {
    Residual {
        e_x: observed.x - predicted.x,
        e_v: observed.v - predicted.v,
        e_att: predicted.q.conj().mul(observed.q).log(),
        e_omega: observed.omega - predicted.omega,
    }
}

/// Network input before normalization.
#[derive(Clone, Debug)]
pub struct AugmentationInput<T> {
    pub residual: Residual<T>,
    /// Per sample: position relative to the current reference, velocity,
    /// heading relative to the current reference heading.
    pub window: Vec<[f64; 7]>,
}

impl<T: Real> AugmentationInput<T> {
    /// Normalized feature vector of length [`INPUT_SIZE`].
    pub fn features(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(INPUT_SIZE);
        for (k, v) in self.residual.to_array().into_iter().enumerate() {
            out.push(v / RESIDUAL_SCALE[k / 3]);
        }
        for s in &self.window {
            out.extend(s[..3].iter().map(|v| T::cst(v / WINDOW_SCALE[0])));
            out.extend(s[3..6].iter().map(|v| T::cst(v / WINDOW_SCALE[1])));
            out.push(T::cst(s[6] / WINDOW_SCALE[2]));
        }
        out
    }
}

pub fn assemble_input<T: Real>(
    residual: Residual<T>,
    refs: &[ReferenceState],
    current: &ReferenceState,
) -> AugmentationInput<T> {
    let window = refs
        .iter()
        .map(|r| {
            [
                r.x[0] - current.x[0],
                r.x[1] - current.x[1],
                r.x[2] - current.x[2],
                r.v[0],
                r.v[1],
                r.v[2],
                wrap_angle(r.psi - current.psi),
            ]
        })
        .collect();
    AugmentationInput { residual, window }
}

/// A REN step over some scalar type.
pub trait RenEval<T> {
    fn dims(&self) -> RenDims;
    /// Returns `(next state, output)`.
    fn step(&self, x: &[T], u: &[T]) -> (Vec<T>, Vec<T>);
}

impl RenEval<f64> for RenWeights {
    fn dims(&self) -> RenDims {
        self.dims
    }

    fn step(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let state = RenState {
            x: nalgebra::DVector::from_column_slice(x),
        };
        let (next, y) = crate::ren::forward(self, &state, u);
        (next.x.as_slice().to_vec(), y)
    }
}

/// REN recorded on the AD tape, accumulating explicit-weight gradients.
pub struct TapeRen {
    pub weights: Rc<RenWeights>,
    pub grads: Rc<RefCell<WeightGrads>>,
}

impl TapeRen {
    pub fn new(weights: RenWeights) -> Self {
        let dims = weights.dims;
        Self {
            weights: Rc::new(weights),
            grads: Rc::new(RefCell::new(WeightGrads::zeros(dims))),
        }
    }
}

impl RenEval<Var> for TapeRen {
    fn dims(&self) -> RenDims {
        self.weights.dims
    }

    fn step(&self, x: &[Var], u: &[Var]) -> (Vec<Var>, Vec<Var>) {
        forward_var(&self.weights, &self.grads, x, u)
    }
}

/// `a_Q = scale · tanh(y)` per axis, so `‖a_Q‖ ≤ scale·√3`.
pub fn neural_accel<T: Real, R: RenEval<T>>(ren: &R, x: &[T], input: &AugmentationInput<T>, scale: f64) -> (Vec<T>, Vec3<T>) {
    let (next, y) = ren.step(x, &input.features());
    let a = Vec3::new(y[0].tanh() * scale, y[1].tanh() * scale, y[2].tanh() * scale);
    (next, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Per-axis saturation of the auxiliary acceleration, m/s².
    pub scale: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: 20.0,
        }
    }
}

/// Everything the NGTC carries from one step to the next.
#[derive(Clone, Debug)]
pub struct NgtcMemory<T> {
    pub ctrl: ControllerMemory<T>,
    pub prev: Option<(QuadState<T>, [T; 4])>,
    pub ren_x: Vec<T>,
}

impl<T: Real> NgtcMemory<T> {
    pub fn new(ren_states: usize) -> Self {
        Self {
            ctrl: ControllerMemory::default(),
            prev: None,
            ren_x: vec![T::zero(); ren_states],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NgtcOutput<T> {
    pub command: ControlCommand<T>,
    pub a_q: Vec3<T>,
    pub residual: Residual<T>,
}

/// One NGTC step at control index `k` of `track`. Without a network the
/// result is the plain DFBC step.
#[allow(clippy::too_many_arguments)]
pub fn ngtc_step<T: Real, R: RenEval<T>, A: Allocate<T>>(
    state: &QuadState<T>,
    track: &ReferenceTrack,
    k: usize,
    ren: Option<&R>,
    aug: &AugmentationConfig,
    nominal: &NominalModel,
    gains: &Gains,
    mem: &mut NgtcMemory<T>,
    allocator: &A,
) -> Result<NgtcOutput<T>> {
    let r = track.at(k);
    let (a_q, residual) = match ren {
        Some(ren) if aug.enabled => {
            let residual = match &mem.prev {
                Some((prev, cmd)) => compute_residual(state, &nominal_predict(nominal, prev, cmd)?),
                None => Residual::zeros(),
            };
            let input = assemble_input(residual, &track.window(k, HORIZON), r);
            let (next, a_q) = neural_accel(ren, &mem.ren_x, &input, aug.scale);
            mem.ren_x = next;
            (a_q, residual)
        }
        _ => (Vec3::zeros(), Residual::zeros()),
    };
    let command = dfbc_step(state, r, a_q, gains, &nominal.params, &mut mem.ctrl, allocator);
    if ren.is_some() && aug.enabled {
        mem.prev = Some((*state, command.rotor_thrusts));
    }
    Ok(NgtcOutput {
        command,
        a_q,
        residual,
    })
}
