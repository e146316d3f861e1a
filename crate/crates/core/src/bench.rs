//! Evaluation protocol: single experiments, accuracy and robustness suites,
//! controller timing and trace files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{Flags, Gains, QpAllocator};
use crate::dynamics::{Disturbance, QuadParams, QuadState};
use crate::math::{Quat, Vec3};
use crate::ren::RenWeights;
use crate::sim::{flat_initial_state, flat_state, Plant};
use crate::trajectory::{sample_dataset, LissajousRanges, ReferenceTrack, TrajectoryKind, TrajectorySpec};
use crate::youla::{ngtc_step, AugmentationConfig, NgtcMemory, NominalModel};
use crate::{Error, Result};

/// Suite settings and benchmark trajectory geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Length of each run, s.
    pub duration: f64,
    /// Lissajous references per robustness row.
    pub trajectories: usize,
    pub seed: u64,
    pub crash_distance: f64,
    pub transient: f64,
    pub dt: f64,
    pub hloop_radius: f64,
    pub hloop_speed: f64,
    pub hloop_speed_infeasible: f64,
    pub vloop_radius: f64,
    pub vloop_speed: f64,
    pub vloop_speed_infeasible: f64,
    pub lemniscate_scale: f64,
    pub lemniscate_rate: f64,
    pub lemniscate_rate_infeasible: f64,
    /// Speed ramp at the start of loops and lemniscates, s.
    pub ramp: f64,
    /// Infeasible circle: speed and centripetal acceleration.
    pub circle_speed: f64,
    pub circle_accel: f64,
    /// Circle of the disturbance-step experiment (same speed).
    pub step_circle_accel: f64,
    pub step_force: f64,
    /// Start and end of the step force, s.
    pub step_window: [f64; 2],
    pub timing_iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            trajectories: 10,
            seed: 1000,
            crash_distance: 5.0,
            transient: 0.5,
            dt: 0.01,
            hloop_radius: 5.0,
            hloop_speed: 10.0,
            hloop_speed_infeasible: 18.0,
            vloop_radius: 3.0,
            vloop_speed: 6.0,
            vloop_speed_infeasible: 12.0,
            lemniscate_scale: 5.0,
            lemniscate_rate: 1.0,
            lemniscate_rate_infeasible: 2.5,
            ramp: 2.0,
            circle_speed: 15.0,
            circle_accel: 45.0,
            step_circle_accel: 40.0,
            step_force: 15.0,
            step_window: [3.0, 5.0],
            timing_iterations: 10_000,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.duration,
            self.crash_distance,
            self.dt,
            self.hloop_radius,
            self.hloop_speed,
            self.hloop_speed_infeasible,
            self.vloop_radius,
            self.vloop_speed,
            self.vloop_speed_infeasible,
            self.lemniscate_scale,
            self.lemniscate_rate,
            self.lemniscate_rate_infeasible,
            self.circle_speed,
            self.circle_accel,
            self.step_circle_accel,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("bench geometry and durations must be positive".into()));
        }
        let [a, b] = self.step_window;
        if !(0.0 <= a && a <= b && b <= self.duration) {
            return Err(Error::InvalidParameter("step window must lie inside the run".into()));
        }
        if !(0.0..self.duration).contains(&self.transient) || self.ramp < 0.0 {
            return Err(Error::InvalidParameter("transient must lie inside the run".into()));
        }
        Ok(())
    }

    fn spec(&self, kind: TrajectoryKind) -> TrajectorySpec {
        TrajectorySpec {
            kind,
            center: [0.0; 3],
            duration: self.duration,
        }
    }

    /// Named accuracy-suite references; infeasible variants carry a `*`.
    pub fn accuracy_trajectories(&self) -> Vec<(String, TrajectorySpec)> {
        let ramp = self.ramp;
        let hloop = |speed| TrajectoryKind::HorizontalLoop {
            radius: self.hloop_radius,
            speed,
            ramp,
        };
        let vloop = |speed| TrajectoryKind::VerticalLoop {
            radius: self.vloop_radius,
            speed,
            ramp,
        };
        let lem = |rate| TrajectoryKind::Lemniscate {
            scale: self.lemniscate_scale,
            rate,
            ramp,
        };
        vec![
            ("hover".into(), self.spec(TrajectoryKind::Hover)),
            ("hor-loop".into(), self.spec(hloop(self.hloop_speed))),
            ("ver-loop".into(), self.spec(vloop(self.vloop_speed))),
            ("lemniscate".into(), self.spec(lem(self.lemniscate_rate))),
            ("hor-loop*".into(), self.spec(hloop(self.hloop_speed_infeasible))),
            ("ver-loop*".into(), self.spec(vloop(self.vloop_speed_infeasible))),
            ("lemniscate*".into(), self.spec(lem(self.lemniscate_rate_infeasible))),
            (
                "circle*".into(),
                TrajectorySpec::circle_from_limits(self.circle_speed, self.circle_accel, self.duration),
            ),
        ]
    }

    /// Accuracy-suite references plus `circle`, the fast feasible circle
    /// used by the disturbance-step experiment.
    pub fn named_trajectories(&self) -> Vec<(String, TrajectorySpec)> {
        let mut out = self.accuracy_trajectories();
        out.push(("circle".into(), self.step_circle()));
        out
    }

    pub fn step_circle(&self) -> TrajectorySpec {
        TrajectorySpec::circle_from_limits(self.circle_speed, self.step_circle_accel, self.duration)
    }

    /// Fast circle with a lateral force (world +y) acting over `step_window`.
    pub fn step_experiment(&self, controller: Controller) -> ExperimentSpec {
        ExperimentSpec {
            name: "circle-step".into(),
            controller,
            trajectory: self.step_circle(),
            perturbation: Perturbation {
                f_ext: [0.0, self.step_force, 0.0],
                window: Some(self.step_window),
                ..Perturbation::default()
            },
            duration: self.duration,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Controller {
    Dfbc,
    Ngtc,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Dfbc => "dfbc",
            Controller::Ngtc => "ngtc",
        }
    }
}

/// Differences between the simulated vehicle and the controller's model.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub mass_factor: f64,
    pub tau_factor: f64,
    pub drag_factor: f64,
    /// Constant external force, N.
    pub f_ext: [f64; 3],
    /// Interval during which `f_ext` acts; the whole run when `None`.
    pub window: Option<[f64; 2]>,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            mass_factor: 1.0,
            tau_factor: 1.0,
            drag_factor: 1.0,
            f_ext: [0.0; 3],
            window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub controller: Controller,
    pub trajectory: TrajectorySpec,
    pub perturbation: Perturbation,
    pub duration: f64,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.perturbation;
        if [p.mass_factor, p.tau_factor, p.drag_factor].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidParameter(format!("{}: perturbation factors must be positive", self.name)));
        }
        if let Some([a, b]) = p.window {
            if !(0.0 <= a && a <= b && b <= self.duration) {
                return Err(Error::InvalidParameter(format!("{}: disturbance window outside the run", self.name)));
            }
        }
        if !(self.duration > 0.0) {
            return Err(Error::InvalidParameter(format!("{}: duration must be positive", self.name)));
        }
        self.trajectory.validate()
    }
}

/// Model, gains and (for NGTC) network shared by every run of a suite.
pub struct Harness<'a> {
    pub nominal: &'a QuadParams,
    pub gains: &'a Gains,
    pub ren: Option<&'a RenWeights>,
    pub augmentation: AugmentationConfig,
    pub dt: f64,
    pub transient: f64,
    pub crash_distance: f64,
}

impl<'a> Harness<'a> {
    pub fn new(nominal: &'a QuadParams, gains: &'a Gains, ren: Option<&'a RenWeights>, bench: &BenchConfig) -> Self {
        Self {
            nominal,
            gains,
            ren,
            augmentation: AugmentationConfig::default(),
            dt: bench.dt,
            transient: bench.transient,
            crash_distance: bench.crash_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: [f64; 3],
    pub x_ref: [f64; 3],
    pub v: [f64; 3],
    pub q: [f64; 4],
    pub thrusts: [f64; 4],
    pub a_q: [f64; 3],
    pub f_ext: [f64; 3],
    pub flags: u8,
}

impl TraceRow {
    fn error_sq(&self) -> f64 {
        (0..3).map(|i| (self.x[i] - self.x_ref[i]).powi(2)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingStats {
    pub median_us: f64,
    pub p99_us: f64,
}

impl TimingStats {
    pub fn from_samples(mut us: Vec<f64>) -> Self {
        if us.is_empty() {
            return Self {
                median_us: 0.0,
                p99_us: 0.0,
            };
        }
        us.sort_by(f64::total_cmp);
        let at = |p: f64| us[((us.len() - 1) as f64 * p).round() as usize];
        Self {
            median_us: at(0.5),
            p99_us: at(0.99),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub controller: Controller,
    pub rmse: f64,
    pub peak_error: f64,
    pub crashed: bool,
    /// Fraction of steps whose allocation hit a thrust bound.
    pub saturation: f64,
    pub timing: TimingStats,
    pub dt: f64,
    pub transient: f64,
    pub trace: Vec<TraceRow>,
}

impl RunResult {
    /// Equality of everything except wall-clock timing.
    pub fn same_outcome(&self, o: &RunResult) -> bool {
        self.rmse.to_bits() == o.rmse.to_bits()
            && self.peak_error.to_bits() == o.peak_error.to_bits()
            && self.crashed == o.crashed
            && self.saturation == o.saturation
            && self.trace == o.trace
    }
}

/// Position RMSE over the rows from `transient` onward.
pub fn rmse_from_trace(rows: &[TraceRow], dt: f64, transient: f64) -> f64 {
    let skip = (transient / dt).round() as usize;
    let tail = rows.get(skip..).unwrap_or(&[]);
    if tail.is_empty() {
        return f64::NAN;
    }
    (tail.iter().map(TraceRow::error_sq).sum::<f64>() / tail.len() as f64).sqrt()
}

fn row(t: f64, s: &QuadState<f64>, x_ref: [f64; 3], a_q: [f64; 3], f_ext: [f64; 3], flags: u8) -> TraceRow {
    TraceRow {
        t,
        x: s.x.to_array(),
        x_ref,
        v: s.v.to_array(),
        q: s.q.to_f64(),
        thrusts: s.thrusts,
        a_q,
        f_ext,
        flags,
    }
}

/// Closed loop at 100 Hz on the perturbed plant with drag.
pub fn run_experiment(spec: &ExperimentSpec, h: &Harness) -> Result<RunResult> {
    spec.validate()?;
    if spec.controller == Controller::Ngtc && h.ren.is_none() {
        return Err(Error::Checkpoint(format!("{}: ngtc run without network weights", spec.name)));
    }
    let p = &spec.perturbation;
    let plant = Plant {
        params: h.nominal.perturbed(p.mass_factor, p.tau_factor, p.drag_factor),
        drag: true,
        dt: h.dt,
    };
    let traj = TrajectorySpec {
        duration: spec.duration,
        ..spec.trajectory.clone()
    };
    let track = ReferenceTrack::build(&traj, h.dt);
    let nominal = NominalModel::new(h.nominal.clone(), h.dt);
    let ren = match spec.controller {
        Controller::Dfbc => None,
        Controller::Ngtc => h.ren,
    };
    let steps = track.steps();
    let mut mem = NgtcMemory::new(ren.map_or(0, |r| r.dims.n));
    let mut state = flat_initial_state(&track, &plant.params);
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(row(0.0, &state, track.at(0).x, [0.0; 3], [0.0; 3], 0));
    let mut timings = Vec::with_capacity(steps);
    let (mut crashed, mut saturated) = (false, 0usize);

    for k in 0..steps {
        let t = k as f64 * h.dt;
        let active = p.window.is_none_or(|[a, b]| t >= a && t < b);
        let dist = Disturbance {
            f_ext: if active { p.f_ext } else { [0.0; 3] },
            mu_ext: [0.0; 3],
        };
        let start = Instant::now();
        let out = ngtc_step(&state, &track, k, ren, &h.augmentation, &nominal, h.gains, &mut mem, &QpAllocator);
        timings.push(start.elapsed().as_secs_f64() * 1e6);
        let next = out.and_then(|out| {
            let next = crate::dynamics::rk4_step(&state, &out.command.rotor_thrusts, &dist, &plant.params, h.dt, true)?;
            Ok((out, next))
        });
        let (out, next) = match next {
            Ok(v) if v.1.is_finite() => v,
            _ => {
                crashed = true;
                break;
            }
        };
        if out.command.flags.contains(Flags::SATURATED) {
            saturated += 1;
        }
        state = next;
        let r = track.at(k + 1);
        let r = row((k + 1) as f64 * h.dt, &state, r.x, out.a_q.to_f64(), dist.f_ext, out.command.flags.0);
        let far = r.error_sq() > h.crash_distance * h.crash_distance;
        trace.push(r);
        if far {
            crashed = true;
            break;
        }
    }
    let peak_error = trace.iter().map(|r| r.error_sq().sqrt()).fold(0.0, f64::max);
    Ok(RunResult {
        name: spec.name.clone(),
        controller: spec.controller.clone(),
        rmse: rmse_from_trace(&trace, h.dt, h.transient),
        peak_error,
        crashed,
        saturation: saturated as f64 / (trace.len() - 1).max(1) as f64,
        timing: TimingStats::from_samples(timings),
        dt: h.dt,
        transient: h.transient,
        trace,
    })
}

/// Run `specs` on up to `available_parallelism` threads, keeping order.
pub fn run_all(specs: &[ExperimentSpec], h: &Harness) -> Vec<Result<RunResult>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
    if workers <= 1 {
        return specs.iter().map(|s| run_experiment(s, h)).collect();
    }
    let chunk = specs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| run_experiment(s, h)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|j| j.join().expect("experiment thread panicked")).collect()
    })
}

/// Delimited results with a schema header line.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(schema: &str, columns: &[&str]) -> Self {
        Self {
            schema: schema.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {}\n{}\n", self.schema, self.columns.join("\t"));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join("\t"));
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub trajectory: String,
    pub dfbc: RunResult,
    pub ngtc: Option<RunResult>,
}

/// DFBC and (when a network is given) NGTC on every accuracy trajectory.
pub fn bench_accuracy(cfg: &BenchConfig, h: &Harness) -> Result<(Vec<AccuracyRow>, Table)> {
    let mut specs = Vec::new();
    for (name, traj) in cfg.accuracy_trajectories() {
        for controller in [Controller::Dfbc, Controller::Ngtc] {
            if controller == Controller::Ngtc && h.ren.is_none() {
                continue;
            }
            specs.push(ExperimentSpec {
                name: name.clone(),
                controller,
                trajectory: traj.clone(),
                perturbation: Perturbation::default(),
                duration: cfg.duration,
                seed: cfg.seed,
            });
        }
    }
    let mut results = run_all(&specs, h).into_iter().collect::<Result<Vec<_>>>()?.into_iter().peekable();
    let mut rows = Vec::new();
    while let Some(dfbc) = results.next() {
        let ngtc = results.next_if(|r| r.controller == Controller::Ngtc && r.name == dfbc.name);
        rows.push(AccuracyRow {
            trajectory: dfbc.name.clone(),
            dfbc,
            ngtc,
        });
    }
    let mut table = Table::new(
        "ngtc-accuracy 1",
        &["trajectory", "dfbc_rmse_m", "dfbc_crash", "ngtc_rmse_m", "ngtc_crash"],
    );
    if h.ren.is_none() {
        table.rows.push(vec!["# warning: no checkpoint, ngtc columns empty".into()]);
    }
    for r in &rows {
        table.rows.push(vec![
            r.trajectory.clone(),
            format!("{:.4}", r.dfbc.rmse),
            r.dfbc.crashed.to_string(),
            fmt_opt(r.ngtc.as_ref().map(|n| n.rmse)),
            r.ngtc.as_ref().map_or_else(String::new, |n| n.crashed.to_string()),
        ]);
    }
    Ok((rows, table))
}

/// Mean and spread over the non-crashed runs of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub crash_rate: f64,
    pub runs: usize,
}

impl CellStats {
    pub fn of(results: &[RunResult]) -> Self {
        let ok: Vec<f64> = results.iter().filter(|r| !r.crashed).map(|r| r.rmse).collect();
        let runs = results.len();
        let crash_rate = if runs == 0 { 0.0 } else { (runs - ok.len()) as f64 / runs as f64 };
        if ok.is_empty() {
            return Self {
                mean: None,
                std: None,
                crash_rate,
                runs,
            };
        }
        let n = ok.len() as f64;
        let mean = ok.iter().sum::<f64>() / n;
        let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            crash_rate,
            runs,
        }
    }
}

/// Named rows of the robustness table. Force rows push along a horizontal
/// direction drawn per reference.
pub fn robustness_rows() -> Vec<(&'static str, Perturbation, f64)> {
    let base = Perturbation::default;
    vec![
        ("nominal", base(), 0.0),
        ("+50% drag", Perturbation { drag_factor: 1.5, ..base() }, 0.0),
        ("+30% tau_mot", Perturbation { tau_factor: 1.3, ..base() }, 0.0),
        ("-30% mass", Perturbation { mass_factor: 0.7, ..base() }, 0.0),
        ("+30% mass", Perturbation { mass_factor: 1.3, ..base() }, 0.0),
        ("10N force", base(), 10.0),
        ("15N force", base(), 15.0),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub name: String,
    pub dfbc: CellStats,
    pub ngtc: Option<CellStats>,
}

/// Feasible Lissajous references of the robustness suite.
pub fn robustness_trajectories(cfg: &BenchConfig, nominal: &QuadParams) -> Result<Vec<TrajectorySpec>> {
    Ok(sample_dataset(cfg.trajectories, cfg.seed, nominal, 0.10, cfg.duration, &LissajousRanges::default())?
        .into_iter()
        .map(|e| e.spec)
        .collect())
}

pub fn bench_robustness(cfg: &BenchConfig, h: &Harness) -> Result<(Vec<RobustnessRow>, Table)> {
    let trajectories = robustness_trajectories(cfg, h.nominal)?;
    let mut rows = Vec::new();
    for (name, perturbation, force) in robustness_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut specs = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let p = Perturbation {
                f_ext: [force * angle.cos(), force * angle.sin(), 0.0],
                ..perturbation.clone()
            };
            for controller in [Controller::Dfbc, Controller::Ngtc] {
                if controller == Controller::Ngtc && h.ren.is_none() {
                    continue;
                }
                specs.push(ExperimentSpec {
                    name: format!("{name}#{i}"),
                    controller,
                    trajectory: traj.clone(),
                    perturbation: p.clone(),
                    duration: cfg.duration,
                    seed: cfg.seed + i as u64,
                });
            }
        }
        let results = run_all(&specs, h).into_iter().collect::<Result<Vec<_>>>()?;
        let pick = |c: Controller| results.iter().filter(|r| r.controller == c).cloned().collect::<Vec<_>>();
        let ngtc = pick(Controller::Ngtc);
        rows.push(RobustnessRow {
            name: name.to_string(),
            dfbc: CellStats::of(&pick(Controller::Dfbc)),
            ngtc: (!ngtc.is_empty()).then(|| CellStats::of(&ngtc)),
        });
    }
    let mut table = Table::new(
        "ngtc-robustness 1",
        &[
            "perturbation",
            "dfbc_mean_m",
            "dfbc_std_m",
            "dfbc_crash_rate",
            "ngtc_mean_m",
            "ngtc_std_m",
            "ngtc_crash_rate",
        ],
    );
    if h.ren.is_none() {
        table.rows.push(vec!["# warning: no checkpoint, ngtc columns empty".into()]);
    }
    for r in &rows {
        let mut cells = vec![r.name.clone(), fmt_opt(r.dfbc.mean), fmt_opt(r.dfbc.std), format!("{:.3}", r.dfbc.crash_rate)];
        match &r.ngtc {
            Some(n) => cells.extend([fmt_opt(n.mean), fmt_opt(n.std), format!("{:.3}", n.crash_rate)]),
            None => cells.extend([String::new(), String::new(), String::new()]),
        }
        table.rows.push(cells);
    }
    Ok((rows, table))
}

/// Fraction of runs that crashed.
pub fn crash_fraction<'r>(runs: impl IntoIterator<Item = &'r RunResult>) -> f64 {
    let (mut n, mut c) = (0usize, 0usize);
    for r in runs {
        n += 1;
        c += r.crashed as usize;
    }
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub dfbc: TimingStats,
    pub ngtc: TimingStats,
    pub iterations: usize,
}

/// Controller step latency on synthetic states around a Lissajous
/// reference. Runs on the calling thread only.
pub fn bench_timing(iterations: usize, nominal: &QuadParams, gains: &Gains, ren: &RenWeights, seed: u64) -> TimingReport {
    let spec = TrajectorySpec::lissajous([2.0, 2.0, 0.5], [1.0, 1.3, 0.7], [0.0, 0.5, 1.0], 20.0);
    let dt = 0.01;
    let track = ReferenceTrack::build(&spec, dt);
    let nominal_model = NominalModel::new(nominal.clone(), dt);
    let aug = AugmentationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<QuadState<f64>> = (0..track.steps().min(1000))
        .map(|k| {
            let mut s = flat_state(track.at(k), nominal);
            s.x += Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let tilt = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), rng.random_range(-0.1..0.1));
            s.q = s.q.mul(tilt);
            s
        })
        .collect();
    let measure = |ren: Option<&RenWeights>| {
        let mut mem = NgtcMemory::new(ren.map_or(0, |r| r.dims.n));
        let mut samples = Vec::with_capacity(iterations);
        for i in 0..iterations {
            let k = i % states.len();
            let start = Instant::now();
            let out = ngtc_step(&states[k], &track, k, ren, &aug, &nominal_model, gains, &mut mem, &QpAllocator);
            samples.push(start.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(&out);
        }
        TimingStats::from_samples(samples)
    };
    let dfbc = measure(None);
    let ngtc = measure(Some(ren));
    TimingReport {
        dfbc,
        ngtc,
        iterations,
    }
}

pub const TRACE_SCHEMA: &str = "# ngtc-trace 1";
const TRACE_COLUMNS: &str = "t\tx\ty\tz\tx_ref\ty_ref\tz_ref\tvx\tvy\tvz\tqw\tqx\tqy\tqz\tu1\tu2\tu3\tu4\taq_x\taq_y\taq_z\tf_x\tf_y\tf_z\tflags";

/// Write the trace of `result` to `path`. Nothing is left behind on error.
pub fn emit_traces(result: &RunResult, path: &Path) -> Result<()> {
    if result.trace.is_empty() {
        return Err(Error::InvalidParameter("run has no trace".into()));
    }
    let mut text = format!("{TRACE_SCHEMA}\n{TRACE_COLUMNS}\n");
    for r in &result.trace {
        let nums = std::iter::once(r.t)
            .chain(r.x)
            .chain(r.x_ref)
            .chain(r.v)
            .chain(r.q)
            .chain(r.thrusts)
            .chain(r.a_q)
            .chain(r.f_ext);
        for v in nums {
            let _ = write!(text, "{v:e}\t");
        }
        let _ = writeln!(text, "{}", r.flags);
    }
    let tmp = path.with_extension("tmp");
    let written = std::fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(text.as_bytes())?;
        f.sync_all()
    });
    if let Err(e) = written.and_then(|_| std::fs::rename(&tmp, path)) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Parse a trace written by [`emit_traces`].
pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_SCHEMA) {
        return Err(Error::InvalidParameter(format!("{}: not a trace file", path.display())));
    }
    lines.next();
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 25 {
                return Err(Error::InvalidParameter(format!("trace row with {} fields", f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::InvalidParameter(format!("bad number `{}`", f[i])));
            let arr = |a: usize| -> Result<[f64; 3]> { Ok([num(a)?, num(a + 1)?, num(a + 2)?]) };
            Ok(TraceRow {
                t: num(0)?,
                x: arr(1)?,
                x_ref: arr(4)?,
                v: arr(7)?,
                q: [num(10)?, num(11)?, num(12)?, num(13)?],
                thrusts: [num(14)?, num(15)?, num(16)?, num(17)?],
                a_q: arr(18)?,
                f_ext: arr(21)?,
                flags: f[24].parse().map_err(|_| Error::InvalidParameter("bad flags".into()))?,
            })
        })
        .collect()
}
