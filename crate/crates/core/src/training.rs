//! Analytic policy gradient training of the augmentation network.
//!
//! Each episode simulates the closed loop (drag-free plant, nominal model,
//! smooth allocation) on one reference with one disturbance draw. The loss
//! is the mean quadratic stage cost along the rollout, and its gradient with
//! respect to the REN direct parameters is obtained by reverse-mode
//! differentiation through every step.

use std::cell::RefCell;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{Session, Var};
use crate::controller::{flat_attitude, Allocate, Gains, QpAllocator, ReferenceState, SmoothAllocator};
use crate::dynamics::{Disturbance, QuadParams, QuadState};
use crate::math::{Quat, Real, Vec3};
use crate::ren::{self, materialize, materialize_vjp, DirectParams, RenDims, RenWeights, WeightGrads};
use crate::sim::{episode_disturbances, flat_initial_state, rollout, DisturbanceRanges, LoopSetup, Plant};
use crate::trajectory::{ReferenceTrack, TrajectorySpec};
use crate::youla::{AugmentationConfig, NominalModel, RenEval, TapeRen};
use crate::{Error, Result};

/// Quadratic stage-cost weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub q_x: [f64; 3],
    pub q_v: [f64; 3],
    pub q_q: [f64; 3],
    pub q_omega: [f64; 3],
    pub q_u: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            q_x: [200.0, 200.0, 500.0],
            q_v: [1.0; 3],
            q_q: [5.0, 5.0, 200.0],
            q_omega: [1.0; 3],
            q_u: [6.0; 4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.q_x.iter().chain(&self.q_v).chain(&self.q_q).chain(&self.q_omega).chain(&self.q_u);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Flatness-derived attitude and body-rate targets of one reference sample.
#[derive(Clone, Copy, Debug)]
pub struct AttitudeTarget {
    pub q: Quat<f64>,
    pub omega: Vec3<f64>,
}

impl AttitudeTarget {
    pub fn of(r: &ReferenceState, params: &QuadParams) -> Self {
        let (_, q, omega) = flat_attitude(r, params);
        Self { q, omega }
    }
}

/// Stage cost of `state` against `r` with rotor command `cmd`.
pub fn stage_loss<T: Real>(state: &QuadState<T>, r: &ReferenceState, cmd: &[T; 4], w: &LossWeights, params: &QuadParams) -> T {
    stage_loss_with(state, r, &AttitudeTarget::of(r, params), cmd, w, params)
}

/// [`stage_loss`] with a precomputed attitude target.
pub fn stage_loss_with<T: Real>(
    state: &QuadState<T>,
    r: &ReferenceState,
    target: &AttitudeTarget,
    cmd: &[T; 4],
    w: &LossWeights,
    params: &QuadParams,
) -> T {
    let weighted = |e: Vec3<T>, q: &[f64; 3]| e.x * e.x * q[0] + e.y * e.y * q[1] + e.z * e.z * q[2];
    let e_x = state.x - Vec3::from_f64(r.x);
    let e_v = state.v - Vec3::from_f64(r.v);
    let q_ref = Quat::<T>::from_f64(target.q.to_f64());
    let e_att = q_ref.conj().mul(state.q).log();
    let e_omega = state.omega - Vec3::from_f64(target.omega.to_array());
    let hover = params.hover_thrust();
    let mut total = weighted(e_x, &w.q_x) + weighted(e_v, &w.q_v) + weighted(e_att, &w.q_q) + weighted(e_omega, &w.q_omega);
    for (u, q) in cmd.iter().zip(&w.q_u) {
        let d = *u - hover;
        total = total + d * d * *q;
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Episode length, s.
    pub episode: f64,
    pub dt: f64,
    pub batch: usize,
    pub learning_rate: f64,
    /// Step size at the last iteration relative to `learning_rate`; the
    /// schedule in between is a half cosine.
    pub final_lr_fraction: f64,
    pub iterations: usize,
    pub disturbance: DisturbanceRanges,
    pub seed: u64,
    /// Global gradient norm limit.
    pub clip: f64,
    pub weights: LossWeights,
    /// Per-step loss charged after a non-finite state or a crash.
    pub penalty: f64,
    /// Initial span excluded from RMSE reporting, s.
    pub transient: f64,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episode: 4.0,
            dt: 0.01,
            batch: 8,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            iterations: 800,
            disturbance: DisturbanceRanges::default(),
            seed: 0,
            clip: 10.0,
            weights: LossWeights::default(),
            penalty: 1e4,
            transient: 0.5,
            checkpoint_every: 50,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episode", self.episode),
            ("dt", self.dt),
            ("learning_rate", self.learning_rate),
            ("clip", self.clip),
            ("penalty", self.penalty),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidParameter("final_lr_fraction must lie in [0, 1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be positive".into()));
        }
        let d = &self.disturbance;
        if !(d.force_cap >= 0.0 && d.torque_cap >= 0.0) {
            return Err(Error::InvalidParameter("disturbance caps must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&d.noise) {
            return Err(Error::InvalidParameter(format!("noise fraction {} outside [0, 1)", d.noise)));
        }
        if !(0.0..self.episode).contains(&self.transient) {
            return Err(Error::InvalidParameter("transient must lie inside the episode".into()));
        }
        self.weights.validate()
    }

    pub fn steps(&self) -> usize {
        (self.episode / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Mean position RMSE over the batch, m.
    pub rmse: f64,
    pub grad_norm: f64,
    pub wall: f64,
}

impl TrainRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.3}",
            self.iteration, self.loss, self.rmse, self.grad_norm, self.wall
        )
    }
}

/// Precomputed inputs of one training rollout.
#[derive(Clone, Debug)]
pub struct Episode {
    pub track: ReferenceTrack,
    pub targets: Vec<AttitudeTarget>,
    pub disturbances: Vec<Disturbance>,
    pub init: QuadState<f64>,
}

impl Episode {
    pub fn new(spec: &TrajectorySpec, disturbance_seed: u64, cfg: &TrainConfig, params: &QuadParams) -> Self {
        let spec = TrajectorySpec {
            duration: cfg.episode,
            ..spec.clone()
        };
        let track = ReferenceTrack::build(&spec, cfg.dt);
        let targets = track.samples.iter().map(|r| AttitudeTarget::of(r, params)).collect();
        let disturbances = episode_disturbances(&cfg.disturbance, cfg.steps(), disturbance_seed);
        let init = flat_initial_state(&track, params);
        Self {
            track,
            targets,
            disturbances,
            init,
        }
    }
}

/// Tracking error beyond which an episode counts as crashed, m.
pub const CRASH_DISTANCE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    /// Position RMSE after the transient, m.
    pub rmse: f64,
    /// A non-finite state or a crash ended the episode early.
    pub unstable: bool,
}

/// Mean stage loss of one closed-loop episode. `ren = None` runs the plain
/// DFBC loop.
pub fn episode_loss<T, R, A>(
    episode: &Episode,
    ren: Option<&R>,
    allocator: &A,
    cfg: &TrainConfig,
    params: &QuadParams,
    gains: &Gains,
) -> (T, EpisodeStats)
where
    T: Real,
    R: RenEval<T>,
    A: Allocate<T>,
{
    let steps = cfg.steps().min(episode.track.steps());
    let plant = Plant {
        params: params.clone(),
        drag: false,
        dt: cfg.dt,
    };
    let setup = LoopSetup {
        track: &episode.track,
        plant: &plant,
        nominal: &NominalModel::new(params.clone(), cfg.dt),
        gains,
        ren,
        aug: &AugmentationConfig::default(),
        allocator,
    };
    let skip = (cfg.transient / cfg.dt).round() as usize;
    let mut total = T::zero();
    let mut sq_err = 0.0;
    let mut counted = 0usize;
    let mut crashed = false;
    let end = rollout(&setup, QuadState::from_f64(&episode.init), steps, &episode.disturbances, |k, out, _, state| {
        let r = episode.track.at(k + 1);
        let e = state.x.to_f64();
        if (0..3).map(|i| (e[i] - r.x[i]).powi(2)).sum::<f64>() > CRASH_DISTANCE * CRASH_DISTANCE {
            crashed = true;
            return false;
        }
        total = total + stage_loss_with(state, r, &episode.targets[k + 1], &out.command.rotor_thrusts, &cfg.weights, params);
        if k + 1 >= skip {
            sq_err += (0..3).map(|i| (e[i] - r.x[i]).powi(2)).sum::<f64>();
            counted += 1;
        }
        true
    });
    let unstable = crashed || end.error.is_some();
    if unstable {
        let remaining = steps - end.completed.min(steps) + crashed as usize;
        total = total + cfg.penalty * remaining as f64;
    }
    let rmse = if counted > 0 { (sq_err / counted as f64).sqrt() } else { f64::INFINITY };
    (total / steps as f64, EpisodeStats { rmse, unstable })
}

/// Loss and gradient averaged over a batch of episodes.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub rmse: f64,
    pub grad: Vec<f64>,
    pub unstable: usize,
}

/// Exact gradient of the mean episode loss with respect to `theta`.
pub fn gradient(
    params: &DirectParams,
    dims: RenDims,
    batch: &[Episode],
    cfg: &TrainConfig,
    quad: &QuadParams,
    gains: &Gains,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let weights = Rc::new(materialize(params, dims)?);
    let grads = Rc::new(RefCell::new(WeightGrads::zeros(dims)));
    let ren = TapeRen {
        weights,
        grads: grads.clone(),
    };
    let (mut loss, mut rmse, mut unstable) = (0.0, 0.0, 0);
    for episode in batch {
        let session = Session::new();
        let (l, stats): (Var, _) = episode_loss(episode, Some(&ren), &SmoothAllocator::default(), cfg, quad, gains);
        session.gradient(l);
        loss += l.value();
        rmse += stats.rmse;
        unstable += stats.unstable as usize;
    }
    let n = batch.len() as f64;
    grads.borrow_mut().scale(1.0 / n);
    let grad = materialize_vjp(params, dims, &grads.borrow())?;
    Ok(BatchGradient {
        loss: loss / n,
        rmse: rmse / n,
        grad,
        unstable,
    })
}

/// Loss of the batch without recording a tape.
pub fn batch_loss(params: &DirectParams, dims: RenDims, batch: &[Episode], cfg: &TrainConfig, quad: &QuadParams, gains: &Gains) -> Result<f64> {
    let w = materialize(params, dims)?;
    let total: f64 = batch
        .iter()
        .map(|e| episode_loss::<f64, _, _>(e, Some(&w), &SmoothAllocator::default(), cfg, quad, gains).0)
        .sum();
    Ok(total / batch.len() as f64)
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Rescale `g` in place so its Euclidean norm is at most `limit`. Returns
/// the norm before clipping.
pub fn clip_norm(g: &mut [f64], limit: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DirectParams,
    pub records: Vec<TrainRecord>,
    pub certificate: ren::Certificate,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;

/// Train `init` on `dataset`. `on_record` sees every record as it is
/// produced, including those of a run that later diverges.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    dataset: &[TrajectorySpec],
    init: DirectParams,
    dims: RenDims,
    quad: &QuadParams,
    gains: &Gains,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training dataset".into()));
    }
    let mut params = init;
    let mut adam = Adam::new(params.theta.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut initial = None;
    let mut above = 0usize;
    let start = Instant::now();

    for it in 0..cfg.iterations {
        let batch: Vec<Episode> = (0..cfg.batch)
            .map(|_| {
                if order.is_empty() {
                    order = (0..dataset.len()).collect();
                    order.shuffle(&mut rng);
                }
                let idx = order.pop().expect("refilled above");
                Episode::new(&dataset[idx], rng.random(), cfg, quad)
            })
            .collect();
        let mut bg = gradient(&params, dims, &batch, cfg, quad, gains)?;
        let progress = it as f64 / cfg.iterations.saturating_sub(1).max(1) as f64;
        let f = cfg.final_lr_fraction;
        adam.lr = cfg.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let grad_norm = if bg.grad.iter().all(|g| g.is_finite()) {
            let norm = clip_norm(&mut bg.grad, cfg.clip);
            adam.step(&mut params.theta, &bg.grad);
            norm
        } else {
            log::warn!("iteration {it}: non-finite gradient, update skipped");
            f64::NAN
        };
        if bg.unstable > 0 {
            log::warn!("iteration {it}: {} unstable episodes", bg.unstable);
        }
        let rec = TrainRecord {
            iteration: it,
            loss: bg.loss,
            rmse: bg.rmse,
            grad_norm,
            wall: start.elapsed().as_secs_f64(),
        };
        on_record(&rec);
        records.push(rec);

        let init_loss = *initial.get_or_insert(bg.loss);
        if bg.loss > DIVERGENCE_FACTOR * init_loss {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: bg.loss,
                    initial: init_loss,
                });
            }
        } else {
            above = 0;
        }

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
            if let Some(dir) = &cfg.checkpoint_dir {
                ren::save_checkpoint(&dir.join(format!("ren-{:06}.ckpt", it + 1)), &params, dims)?;
            }
        }
    }
    let weights = materialize(&params, dims)?;
    let certificate = ren::certify(&weights)?;
    if !(certificate.rate < 1.0) {
        return Err(Error::Certificate(format!("final rate {} not below 1", certificate.rate)));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        ren::save_checkpoint(&dir.join("ren-final.ckpt"), &params, dims)?;
    }
    Ok(TrainOutcome {
        params,
        records,
        certificate,
    })
}

/// Disturbed-tracking comparison on held-out draws, evaluated with the exact
/// allocator.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub baseline_rmse: f64,
    pub trained_rmse: f64,
    pub baseline_unstable: usize,
    pub trained_unstable: usize,
}

impl Evaluation {
    /// Relative RMSE reduction of the trained loop over the baseline.
    pub fn improvement(&self) -> f64 {
        1.0 - self.trained_rmse / self.baseline_rmse
    }
}

pub fn evaluate(
    weights: &RenWeights,
    specs: &[TrajectorySpec],
    cfg: &TrainConfig,
    seed: u64,
    quad: &QuadParams,
    gains: &Gains,
) -> Evaluation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Evaluation {
        baseline_rmse: 0.0,
        trained_rmse: 0.0,
        baseline_unstable: 0,
        trained_unstable: 0,
    };
    for spec in specs {
        let episode = Episode::new(spec, rng.random(), cfg, quad);
        let (_, base): (f64, _) = episode_loss(&episode, None::<&RenWeights>, &QpAllocator, cfg, quad, gains);
        let (_, trained): (f64, _) = episode_loss(&episode, Some(weights), &QpAllocator, cfg, quad, gains);
        out.baseline_rmse += base.rmse;
        out.trained_rmse += trained.rmse;
        out.baseline_unstable += base.unstable as usize;
        out.trained_unstable += trained.unstable as usize;
    }
    let n = specs.len().max(1) as f64;
    out.baseline_rmse /= n;
    out.trained_rmse /= n;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stage_loss_examples() {
        let p = QuadParams::default();
        let w = LossWeights::default();
        let s = QuadState::<f64>::hover_at([0.0; 3], &p);
        let r = ReferenceState::hover([0.0; 3]);
        let u = [p.hover_thrust(); 4];
        assert_abs_diff_eq!(stage_loss(&s, &r, &u, &w, &p), 0.0, epsilon = 1e-20);
        let r = ReferenceState::hover([0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(stage_loss(&s, &r, &u, &w, &p), 500.0, epsilon = 1e-9);
    }
}
