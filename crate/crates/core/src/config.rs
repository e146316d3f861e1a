//! Flat `key = value` configuration shared by every subcommand.
//!
//! Blank lines and `#` comments are ignored. Vector values are separated by
//! whitespace or commas; three-axis gains also accept a single value that is
//! applied to every axis. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::bench::BenchConfig;
use crate::controller::Gains;
use crate::dynamics::QuadParams;
use crate::ren::{RenDims, Variant};
use crate::training::TrainConfig;
use crate::trajectory::LissajousRanges;
use crate::youla::{AugmentationConfig, INPUT_SIZE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RenConfig {
    pub dims: RenDims,
    pub epsilon: f64,
    /// `Some` selects the bounded-gain construction.
    pub gamma: Option<f64>,
    /// Scale of the initial output rows.
    pub init_scale: f64,
    pub init_seed: u64,
}

impl Default for RenConfig {
    fn default() -> Self {
        Self {
            dims: RenDims::default(),
            epsilon: 1e-4,
            gamma: None,
            init_scale: 0.01,
            init_seed: 0,
        }
    }
}

impl RenConfig {
    pub fn variant(&self) -> Variant {
        match self.gamma {
            Some(gamma) => Variant::Lipschitz { gamma },
            None => Variant::Contracting,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub margin: f64,
    pub ranges: LissajousRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 64,
            seed: 1,
            margin: 0.10,
            ranges: LissajousRanges::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub quad: QuadParams,
    pub gains: Gains,
    pub ren: RenConfig,
    pub augmentation: AugmentationConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

fn parse_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn scalar(value: &str) -> std::result::Result<f64, String> {
    match parse_list(value)?.as_slice() {
        [v] => Ok(*v),
        other => Err(format!("expected one number, got {}", other.len())),
    }
}

fn count(value: &str) -> std::result::Result<usize, String> {
    value.trim().parse().map_err(|_| format!("`{}` is not a non-negative integer", value.trim()))
}

fn seed(value: &str) -> std::result::Result<u64, String> {
    value.trim().parse().map_err(|_| format!("`{}` is not a seed", value.trim()))
}

fn flag(value: &str) -> std::result::Result<bool, String> {
    match value.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(format!("`{other}` is not on/off")),
    }
}

fn array<const N: usize>(value: &str, broadcast: bool) -> std::result::Result<[f64; N], String> {
    let v = parse_list(value)?;
    if broadcast && v.len() == 1 {
        return Ok([v[0]; N]);
    }
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} numbers, got {}", v.len()))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Parse `text`; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        let err = |line: usize, msg: String| Error::Config {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(idx + 1, format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(|m| err(idx + 1, m))?;
        }
        cfg.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let q = &mut self.quad;
        let g = &mut self.gains;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "mass" => q.mass = scalar(v)?,
            "inertia_xx" => q.inertia[0] = scalar(v)?,
            "inertia_yy" => q.inertia[1] = scalar(v)?,
            "inertia_zz" => q.inertia[2] = scalar(v)?,
            "arm_length" => q.arm_length = scalar(v)?,
            "arm_angle_deg" => q.arm_angle_deg = scalar(v)?,
            "u_min" => q.u_min = scalar(v)?,
            "u_max" => q.u_max = scalar(v)?,
            "tau_mot" => q.tau_mot = scalar(v)?,
            "kappa" => q.kappa = scalar(v)?,
            "drag_x" => q.drag[0] = scalar(v)?,
            "drag_y" => q.drag[1] = scalar(v)?,
            "drag_z" => q.drag[2] = scalar(v)?,
            "g" => q.g = scalar(v)?,

            "kx" => g.kx = array(v, true)?,
            "kv" => g.kv = array(v, true)?,
            "kq_xy" => g.kq_xy = scalar(v)?,
            "kq_z" => g.kq_z = scalar(v)?,
            "komega" => g.komega = array(v, true)?,
            "wc_t" => g.wc[0] = scalar(v)?,
            "wc_mx" => g.wc[1] = scalar(v)?,
            "wc_my" => g.wc[2] = scalar(v)?,
            "wc_mz" => g.wc[3] = scalar(v)?,

            "ren_n" => self.ren.dims.n = count(v)?,
            "ren_q" => self.ren.dims.q = count(v)?,
            "ren_epsilon" => self.ren.epsilon = scalar(v)?,
            "ren_gamma" => self.ren.gamma = Some(scalar(v)?),
            "ren_init_scale" => self.ren.init_scale = scalar(v)?,
            "ren_init_seed" => self.ren.init_seed = seed(v)?,

            "augmentation" => self.augmentation.enabled = flag(v)?,
            "augmentation_scale" => self.augmentation.scale = scalar(v)?,

            "dataset_count" => self.dataset.count = count(v)?,
            "dataset_seed" => self.dataset.seed = seed(v)?,
            "feasibility_margin" => self.dataset.margin = scalar(v)?,
            "lissajous_amplitude_xy" => self.dataset.ranges.amplitude_xy = scalar(v)?,
            "lissajous_amplitude_z" => self.dataset.ranges.amplitude_z = scalar(v)?,
            "lissajous_frequency" => self.dataset.ranges.frequency = scalar(v)?,

            "episode" => t.episode = scalar(v)?,
            "dt" => t.dt = scalar(v)?,
            "batch" => t.batch = count(v)?,
            "learning_rate" => t.learning_rate = scalar(v)?,
            "final_lr_fraction" => t.final_lr_fraction = scalar(v)?,
            "iterations" => t.iterations = count(v)?,
            "force_cap" => t.disturbance.force_cap = scalar(v)?,
            "torque_cap" => t.disturbance.torque_cap = scalar(v)?,
            "noise" => t.disturbance.noise = scalar(v)?,
            "seed" => t.seed = seed(v)?,
            "clip" => t.clip = scalar(v)?,
            "penalty" => t.penalty = scalar(v)?,
            "transient" => t.transient = scalar(v)?,
            "checkpoint_every" => t.checkpoint_every = count(v)?,
            "checkpoint_dir" => t.checkpoint_dir = Some(PathBuf::from(v)),
            "q_x" => t.weights.q_x = array(v, true)?,
            "q_v" => t.weights.q_v = array(v, true)?,
            "q_q" => t.weights.q_q = array(v, true)?,
            "q_omega" => t.weights.q_omega = array(v, true)?,
            "q_u" => t.weights.q_u = array(v, true)?,

            "bench_duration" => b.duration = scalar(v)?,
            "bench_trajectories" => b.trajectories = count(v)?,
            "bench_seed" => b.seed = seed(v)?,
            "crash_distance" => b.crash_distance = scalar(v)?,
            "hloop_radius" => b.hloop_radius = scalar(v)?,
            "hloop_speed" => b.hloop_speed = scalar(v)?,
            "hloop_speed_infeasible" => b.hloop_speed_infeasible = scalar(v)?,
            "vloop_radius" => b.vloop_radius = scalar(v)?,
            "vloop_speed" => b.vloop_speed = scalar(v)?,
            "vloop_speed_infeasible" => b.vloop_speed_infeasible = scalar(v)?,
            "lemniscate_scale" => b.lemniscate_scale = scalar(v)?,
            "lemniscate_rate" => b.lemniscate_rate = scalar(v)?,
            "lemniscate_rate_infeasible" => b.lemniscate_rate_infeasible = scalar(v)?,
            "ramp" => b.ramp = scalar(v)?,
            "circle_speed" => b.circle_speed = scalar(v)?,
            "circle_accel" => b.circle_accel = scalar(v)?,
            "step_circle_accel" => b.step_circle_accel = scalar(v)?,
            "step_force" => b.step_force = scalar(v)?,
            "step_window" => b.step_window = array(v, false)?,
            "timing_iterations" => b.timing_iterations = count(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        self.gains.validate()?;
        self.ren.dims.validate()?;
        if self.ren.dims.m != INPUT_SIZE {
            return Err(Error::InvalidParameter(format!("REN input size must be {INPUT_SIZE}")));
        }
        if !(self.ren.epsilon > 0.0) || !(self.ren.init_scale >= 0.0) {
            return Err(Error::InvalidParameter("ren_epsilon must be positive, ren_init_scale nonnegative".into()));
        }
        if let Some(gamma) = self.ren.gamma {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidParameter("ren_gamma must be positive".into()));
            }
        }
        if !(self.augmentation.scale > 0.0) {
            return Err(Error::InvalidParameter("augmentation_scale must be positive".into()));
        }
        if self.dataset.count == 0 || !(self.dataset.margin >= 0.0) {
            return Err(Error::InvalidParameter("dataset_count must be positive, margin nonnegative".into()));
        }
        self.train.validate()?;
        self.bench.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, Path::new("test.cfg"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn values_are_applied() {
        let c = parse("mass = 0.9\nkx = 10\nkomega = 1, 2, 3 # trailing\naugmentation = off\n").unwrap();
        assert_eq!(c.quad.mass, 0.9);
        assert_eq!(c.gains.kx, [10.0; 3]);
        assert_eq!(c.gains.komega, [1.0, 2.0, 3.0]);
        assert!(!c.augmentation.enabled);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("mass = 1\n\nbogus = 3\n") {
            Err(Error::Config { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("komega = 1 2\n"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("mass = -1\n"), Err(Error::Config { line: 0, .. })));
    }
}
