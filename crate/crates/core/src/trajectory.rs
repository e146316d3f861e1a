//! Analytic reference trajectories, heading assignment and actuator
//! feasibility screening.
//!
//! Positions are evaluated on truncated Taylor jets so every derivative up to
//! snap is exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{
    angular_velocity_reference, thrust_and_attitude, ControllerMemory, Flags, ReferenceState,
};
use crate::dynamics::QuadParams;
use crate::math::Vec3;
use crate::{Error, Result};

/// Horizontal speed below which the heading is held.
pub const HEADING_SPEED_THRESHOLD: f64 = 0.3;

/// Value and first four time derivatives of a scalar signal.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Jet([f64; 5]);

const BINOM: [[f64; 5]; 5] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0, 0.0],
    [1.0, 2.0, 1.0, 0.0, 0.0],
    [1.0, 3.0, 3.0, 1.0, 0.0],
    [1.0, 4.0, 6.0, 4.0, 1.0],
];

impl Jet {
    fn constant(c: f64) -> Self {
        Jet([c, 0.0, 0.0, 0.0, 0.0])
    }

    /// `c0 + c1 t` evaluated at `t`.
    fn affine(c0: f64, c1: f64, t: f64) -> Self {
        Jet([c0 + c1 * t, c1, 0.0, 0.0, 0.0])
    }

    fn scale(self, k: f64) -> Self {
        Jet(self.0.map(|v| v * k))
    }

    fn mul(self, o: Self) -> Self {
        Jet(std::array::from_fn(|k| (0..=k).map(|j| BINOM[k][j] * self.0[j] * o.0[k - j]).sum()))
    }

    fn sin_cos(self) -> (Self, Self) {
        let g = self.0;
        let mut s = [g[0].sin(), 0.0, 0.0, 0.0, 0.0];
        let mut c = [g[0].cos(), 0.0, 0.0, 0.0, 0.0];
        for k in 0..4 {
            let (mut ds, mut dc) = (0.0, 0.0);
            for j in 0..=k {
                ds += BINOM[k][j] * c[j] * g[k + 1 - j];
                dc -= BINOM[k][j] * s[j] * g[k + 1 - j];
            }
            s[k + 1] = ds;
            c[k + 1] = dc;
        }
        (Jet(s), Jet(c))
    }
}

/// Phase `φ(t)` whose rate ramps smoothly from zero to `rate` over `ramp`
/// seconds (rate, acceleration, jerk continuous).
fn ramped_phase(rate: f64, ramp: f64, t: f64) -> Jet {
    if ramp <= 0.0 {
        return Jet::affine(0.0, rate, t);
    }
    if t >= ramp {
        return Jet::affine(0.5 * rate * ramp - rate * ramp, rate, t);
    }
    let s = t / ramp;
    let p = |c: &[f64], x: f64| c.iter().rev().fold(0.0, |acc, v| acc * x + v);
    let integral = p(&[0.0, 0.0, 0.0, 0.0, 0.0, 7.0, -14.0, 10.0, -2.5], s);
    let s0 = p(&[0.0, 0.0, 0.0, 0.0, 35.0, -84.0, 70.0, -20.0], s);
    let s1 = p(&[0.0, 0.0, 0.0, 140.0, -420.0, 420.0, -140.0], s);
    let s2 = p(&[0.0, 0.0, 420.0, -1680.0, 2100.0, -840.0], s);
    let s3 = p(&[0.0, 840.0, -5040.0, 8400.0, -4200.0], s);
    Jet([
        rate * ramp * integral,
        rate * s0,
        rate * s1 / ramp,
        rate * s2 / (ramp * ramp),
        rate * s3 / (ramp * ramp * ramp),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryKind {
    /// `x_i = A_i sin(ω_i t + φ_i)`.
    Lissajous {
        amplitude: [f64; 3],
        frequency: [f64; 3],
        phase: [f64; 3],
    },
    /// Horizontal circle about `center`, flown at constant speed from the
    /// first instant. Starts on the −y side moving along +x.
    Circle { radius: f64, speed: f64 },
    /// Horizontal circle entered from rest with a smooth speed ramp.
    HorizontalLoop { radius: f64, speed: f64, ramp: f64 },
    /// Circle in the vertical x-z plane entered from rest at its bottom.
    VerticalLoop { radius: f64, speed: f64, ramp: f64 },
    /// Figure-eight `(a sin φ, a sin φ cos φ, 0)` with phase rate `rate`.
    Lemniscate { scale: f64, rate: f64, ramp: f64 },
    Hover,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub center: [f64; 3],
    pub duration: f64,
}

/// Position and its derivatives through snap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatSample {
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub a: [f64; 3],
    pub j: [f64; 3],
    pub s: [f64; 3],
}

impl TrajectorySpec {
    pub fn hover(center: [f64; 3], duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Hover,
            center,
            duration,
        }
    }

    /// Circle with the radius and rate implied by a speed and a centripetal
    /// acceleration: `R = V²/a`.
    pub fn circle_from_limits(speed: f64, accel: f64, duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Circle {
                radius: speed * speed / accel,
                speed,
            },
            center: [0.0, 0.0, 0.0],
            duration,
        }
    }

    pub fn lissajous(amplitude: [f64; 3], frequency: [f64; 3], phase: [f64; 3], duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Lissajous {
                amplitude,
                frequency,
                phase,
            },
            center: [0.0; 3],
            duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("trajectory: {m}")));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return bad("center must be finite");
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let ok = match &self.kind {
            TrajectoryKind::Lissajous {
                amplitude,
                frequency,
                phase,
            } => amplitude
                .iter()
                .chain(frequency)
                .chain(phase)
                .all(|v| v.is_finite()),
            TrajectoryKind::Circle { radius, speed } => pos(*radius) && pos(*speed),
            TrajectoryKind::HorizontalLoop { radius, speed, ramp }
            | TrajectoryKind::VerticalLoop { radius, speed, ramp } => {
                pos(*radius) && pos(*speed) && *ramp >= 0.0
            }
            TrajectoryKind::Lemniscate { scale, rate, ramp } => pos(*scale) && pos(*rate) && *ramp >= 0.0,
            TrajectoryKind::Hover => true,
        };
        if ok {
            Ok(())
        } else {
            bad("geometric parameters must be positive and finite")
        }
    }

    /// Flat outputs at time `t`. Outside `[0, duration]` the position is
    /// held at the nearest end with all derivatives zero.
    pub fn sample(&self, t: f64) -> FlatSample {
        let clamped = t.clamp(0.0, self.duration);
        let jets = self.jets(clamped);
        let col = |k: usize| std::array::from_fn(|i| jets[i].0[k]);
        let mut out = FlatSample {
            x: std::array::from_fn(|i| jets[i].0[0] + self.center[i]),
            v: col(1),
            a: col(2),
            j: col(3),
            s: col(4),
        };
        if t != clamped {
            out.v = [0.0; 3];
            out.a = [0.0; 3];
            out.j = [0.0; 3];
            out.s = [0.0; 3];
        }
        out
    }

    fn jets(&self, t: f64) -> [Jet; 3] {
        let zero = Jet::constant(0.0);
        match &self.kind {
            TrajectoryKind::Hover => [zero; 3],
            TrajectoryKind::Lissajous {
                amplitude,
                frequency,
                phase,
            } => std::array::from_fn(|i| {
                Jet::affine(phase[i], frequency[i], t).sin_cos().0.scale(amplitude[i])
            }),
            TrajectoryKind::Circle { radius, speed } => {
                let (s, c) = Jet::affine(0.0, speed / radius, t).sin_cos();
                [s.scale(*radius), c.scale(-radius), zero]
            }
            TrajectoryKind::HorizontalLoop { radius, speed, ramp } => {
                let (s, c) = ramped_phase(speed / radius, *ramp, t).sin_cos();
                [s.scale(*radius), c.scale(-radius), zero]
            }
            TrajectoryKind::VerticalLoop { radius, speed, ramp } => {
                let (s, c) = ramped_phase(speed / radius, *ramp, t).sin_cos();
                [s.scale(*radius), zero, c.scale(-radius)]
            }
            TrajectoryKind::Lemniscate { scale, rate, ramp } => {
                let (s, c) = ramped_phase(*rate, *ramp, t).sin_cos();
                [s.scale(*scale), s.mul(c).scale(*scale), zero]
            }
        }
    }
}

/// Heading that points along the horizontal velocity, or the previous
/// heading when the horizontal speed is below the threshold.
pub fn heading_policy(v: [f64; 3], previous: f64) -> f64 {
    if v[0].hypot(v[1]) > HEADING_SPEED_THRESHOLD {
        v[1].atan2(v[0])
    } else {
        previous
    }
}

fn heading_rate(v: [f64; 3], a: [f64; 3]) -> f64 {
    let h2 = v[0] * v[0] + v[1] * v[1];
    if h2.sqrt() > HEADING_SPEED_THRESHOLD {
        (v[0] * a[1] - v[1] * a[0]) / h2
    } else {
        0.0
    }
}

/// Reference at time `t` given the heading used at the previous sample.
pub fn sample_reference(spec: &TrajectorySpec, t: f64, previous_heading: f64) -> ReferenceState {
    let f = spec.sample(t);
    ReferenceState {
        x: f.x,
        v: f.v,
        a: f.a,
        j: f.j,
        s: f.s,
        psi: heading_policy(f.v, previous_heading),
        dpsi: heading_rate(f.v, f.a),
    }
}

/// References sampled at a fixed period with the heading policy applied in
/// sequence. Requests past the end return the final sample held.
#[derive(Clone, Debug)]
pub struct ReferenceTrack {
    pub dt: f64,
    pub samples: Vec<ReferenceState>,
}

impl ReferenceTrack {
    pub fn build(spec: &TrajectorySpec, dt: f64) -> Self {
        let steps = (spec.duration / dt).round() as usize;
        let mut samples = Vec::with_capacity(steps + 1);
        let mut psi = 0.0;
        for k in 0..=steps {
            let r = sample_reference(spec, k as f64 * dt, psi);
            psi = r.psi;
            samples.push(r);
        }
        Self { dt, samples }
    }

    /// Number of control steps covered (samples − 1).
    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn at(&self, k: usize) -> &ReferenceState {
        &self.samples[k.min(self.samples.len() - 1)]
    }

    /// `count` samples following step `k`, padded with the final sample.
    pub fn window(&self, k: usize, count: usize) -> Vec<ReferenceState> {
        (1..=count).map(|i| *self.at(k + i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub peak_ratio: f64,
    /// The path passes through (near) free fall.
    pub singular: bool,
}

/// Flatness-based actuator check on a 1 ms grid.
///
/// Rotor thrusts follow from the required collective thrust, the attitude and
/// body rates implied by the flat outputs, a numerically differentiated
/// angular acceleration and the inverse allocation.
pub fn feasibility_classify(spec: &TrajectorySpec, params: &QuadParams, margin: f64) -> Feasibility {
    const DT: f64 = 1e-3;
    let steps = (spec.duration / DT).round() as usize;
    let mut mem = ControllerMemory::<f64>::default();
    let mut thrust = Vec::with_capacity(steps + 1);
    let mut omega = Vec::with_capacity(steps + 1);
    let mut switched = Vec::with_capacity(steps + 1);
    let mut psi = 0.0;
    let mut valid_heading = false;
    let mut singular = false;
    for k in 0..=steps {
        let r = sample_reference(spec, k as f64 * DT, psi);
        let valid = r.v[0].hypot(r.v[1]) > HEADING_SPEED_THRESHOLD;
        switched.push(k > 0 && (valid != valid_heading || (r.psi - psi).abs() > 1.0));
        valid_heading = valid;
        psi = r.psi;
        let mut flags = Flags::default();
        let (t, rot) = thrust_and_attitude(Vec3::from_f64(r.a), r.psi, params, &mut mem, &mut flags);
        if flags.contains(Flags::FREEFALL_HOLD) {
            singular = true;
        }
        let (w, _) = angular_velocity_reference(&r, &rot, t, params, &mut flags);
        thrust.push(t);
        omega.push(w);
    }
    if singular {
        return Feasibility {
            feasible: false,
            peak_ratio: f64::INFINITY,
            singular: true,
        };
    }
    let binv = params.allocation_inverse();
    let j = Vec3::from_f64(params.inertia);
    let mut peak: f64 = 0.0;
    for k in 0..=steps {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(steps));
        let skip = (lo + 1..=hi).any(|i| switched[i]);
        let domega = if skip || hi == lo {
            Vec3::zeros()
        } else {
            (omega[hi] - omega[lo]) / ((hi - lo) as f64 * DT)
        };
        let w = omega[k];
        let mu = domega.hadamard(j) + w.cross(w.hadamard(j));
        let wrench = [thrust[k], mu.x, mu.y, mu.z];
        for row in &binv {
            let u: f64 = row.iter().zip(&wrench).map(|(b, v)| b * v).sum();
            peak = peak.max(u / params.u_max).max((params.u_min - u) / params.u_max);
        }
    }
    Feasibility {
        feasible: peak <= 1.0 + margin,
        peak_ratio: peak,
        singular: false,
    }
}

/// Sampling ranges of the training distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LissajousRanges {
    pub amplitude_xy: f64,
    pub amplitude_z: f64,
    pub frequency: f64,
}

impl Default for LissajousRanges {
    fn default() -> Self {
        Self {
            amplitude_xy: 20.0,
            amplitude_z: 3.0,
            frequency: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub spec: TrajectorySpec,
    /// Index of the draw that produced this spec.
    pub draw: u64,
    pub peak_ratio: f64,
}

fn draw_lissajous(seed: u64, draw: u64, ranges: &LissajousRanges, duration: f64) -> TrajectorySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    let amp = [
        rng.random_range(0.0..=ranges.amplitude_xy),
        rng.random_range(0.0..=ranges.amplitude_xy),
        rng.random_range(0.0..=ranges.amplitude_z),
    ];
    let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=ranges.frequency));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    TrajectorySpec::lissajous(amp, freq, phase, duration)
}

/// Draw Lissajous specs from the training ranges and keep the feasible ones.
pub fn sample_dataset(
    count: usize,
    seed: u64,
    params: &QuadParams,
    margin: f64,
    duration: f64,
    ranges: &LissajousRanges,
) -> Result<Vec<DatasetEntry>> {
    if count == 0 {
        return Err(Error::InvalidParameter("dataset count must be positive".into()));
    }
    const MAX_DRAWS: u64 = 100_000;
    let mut out = Vec::with_capacity(count);
    let mut draw = 0;
    while out.len() < count {
        if draw >= MAX_DRAWS || (draw >= 1000 && (out.len() as f64) < 0.01 * draw as f64) {
            return Err(Error::LowAcceptance {
                accepted: out.len(),
                drawn: draw as usize,
                diagnostic: format!(
                    "ranges A_xy ≤ {}, A_z ≤ {}, ω ≤ {}, margin {margin}",
                    ranges.amplitude_xy, ranges.amplitude_z, ranges.frequency
                ),
            });
        }
        let spec = draw_lissajous(seed, draw, ranges, duration);
        let f = feasibility_classify(&spec, params, margin);
        if f.feasible {
            out.push(DatasetEntry {
                spec,
                draw,
                peak_ratio: f.peak_ratio,
            });
        }
        draw += 1;
    }
    Ok(out)
}

const MANIFEST_HEADER: &str = "# ngtc-dataset 1: kind draw duration ax ay az wx wy wz px py pz peak_ratio feasible";

/// Line-oriented manifest of a dataset.
pub fn manifest_string(entries: &[DatasetEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MANIFEST_HEADER}");
    for e in entries {
        if let TrajectoryKind::Lissajous {
            amplitude: a,
            frequency: w,
            phase: p,
        } = &e.spec.kind
        {
            let _ = writeln!(
                s,
                "lissajous {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} true",
                e.draw, e.spec.duration, a[0], a[1], a[2], w[0], w[1], w[2], p[0], p[1], p[2], e.peak_ratio
            );
        }
    }
    s
}

pub fn write_manifest(path: &Path, entries: &[DatasetEntry]) -> Result<()> {
    std::fs::write(path, manifest_string(entries))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Config {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 14 || f[0] != "lissajous" {
            return Err(err("expected a lissajous record with 14 fields"));
        }
        if f[13] != "true" {
            return Err(err("record is not marked feasible"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number `{s}`")));
        let v: Vec<f64> = f[2..13].iter().map(|s| num(s)).collect::<Result<_>>()?;
        let draw = f[1].parse().map_err(|_| err("bad draw index"))?;
        out.push(DatasetEntry {
            spec: TrajectorySpec::lissajous([v[1], v[2], v[3]], [v[4], v[5], v[6]], [v[7], v[8], v[9]], v[0]),
            draw,
            peak_ratio: v[10],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn jet_product_and_trig() {
        // sin(t)·t at t = 0.7 against hand derivatives
        let t = 0.7;
        let g = Jet::affine(0.0, 1.0, t);
        let (s, c) = g.sin_cos();
        assert_abs_diff_eq!(s.0[4], t.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.0[3], t.sin(), epsilon = 1e-15);
        let f = s.mul(g);
        assert_abs_diff_eq!(f.0[2], 2.0 * t.cos() - t * t.sin(), epsilon = 1e-14);
    }

    #[test]
    fn ramp_is_continuous() {
        let before = ramped_phase(2.0, 1.5, 1.5 - 1e-9);
        let after = ramped_phase(2.0, 1.5, 1.5);
        for k in 0..5 {
            assert_abs_diff_eq!(before.0[k], after.0[k], epsilon = 1e-6);
        }
        assert_eq!(ramped_phase(2.0, 1.5, 0.0).0, [0.0; 5]);
    }

    #[test]
    fn heading_examples() {
        assert_eq!(heading_policy([1.0, 0.0, 0.0], 0.4), 0.0);
        assert_abs_diff_eq!(heading_policy([0.0, 1.0, 0.0], 0.0), std::f64::consts::FRAC_PI_2);
        assert_eq!(heading_policy([0.0, 0.0, 2.0], 0.4), 0.4);
    }

    #[test]
    fn hover_classification() {
        let p = QuadParams::default();
        let f = feasibility_classify(&TrajectorySpec::hover([0.0; 3], 1.0), &p, 0.1);
        assert!(f.feasible);
        assert_abs_diff_eq!(f.peak_ratio, 0.72 * 9.81 / (4.0 * 8.5), epsilon = 1e-12);
        assert_abs_diff_eq!(f.peak_ratio, 0.2077, epsilon = 1e-4);
    }
}
