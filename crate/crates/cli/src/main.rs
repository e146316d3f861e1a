//! `ngtc`: dataset generation, training, simulation and benchmarks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ngtc_core::bench::{self, Controller, ExperimentSpec, Harness, Perturbation};
use ngtc_core::config::Config;
use ngtc_core::ren::{self, DirectParams, RenWeights};
use ngtc_core::training;
use ngtc_core::trajectory::{read_manifest, sample_dataset, write_manifest, TrajectorySpec};
use ngtc_core::Error;

/// Suites in which more than this fraction of runs crash exit with code 3.
const CRASH_DOMINATED: f64 = 0.5;

#[derive(Parser)]
#[command(name = "ngtc", version, about = "Neural-augmented geometric tracking control workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Network checkpoint (written by `train`, read by the others).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output file; stdout for tables when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample feasible Lissajous references and write a manifest.
    GenData,
    /// Train the augmentation network.
    Train {
        /// Dataset manifest; sampled from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run one closed-loop experiment and write its trace.
    Simulate {
        /// Trajectory name (e.g. hor-loop, circle, circle*).
        #[arg(long, default_value = "hover")]
        trajectory: String,
        #[arg(long, value_enum, default_value = "dfbc")]
        controller: ControllerArg,
        #[arg(long, default_value_t = 1.0)]
        mass_factor: f64,
        #[arg(long, default_value_t = 1.0)]
        tau_factor: f64,
        #[arg(long, default_value_t = 1.0)]
        drag_factor: f64,
        /// Constant external force `fx,fy,fz` in N.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        force: Option<Vec<f64>>,
        /// Force window `start,end` in s.
        #[arg(long, value_delimiter = ',')]
        window: Option<Vec<f64>>,
    },
    BenchAccuracy,
    BenchRobustness {
        /// References per perturbation row.
        #[arg(long)]
        trajectories: Option<usize>,
    },
    BenchTiming {
        #[arg(long)]
        iterations: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Dfbc,
    Ngtc,
}

enum Outcome {
    Done,
    CrashDominated,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CrashDominated) => {
            log::error!("more than half of the runs crashed");
            ExitCode::from(3)
        }
        Err(e) => {
            log::error!("{e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. } | Error::InvalidParameter(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn load_weights(path: Option<&Path>) -> anyhow::Result<Option<RenWeights>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let (_, _, weights) = ren::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Some(weights))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let mut cfg = load_config(cli.common.config.as_deref())?;
    let c = &cli.common;
    match cli.command {
        Command::GenData => {
            if let Some(s) = c.seed {
                cfg.dataset.seed = s;
            }
            let d = &cfg.dataset;
            let entries = sample_dataset(d.count, d.seed, &cfg.quad, d.margin, cfg.train.episode, &d.ranges)?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("dataset.txt"));
            write_manifest(&out, &entries)?;
            log::info!("{} feasible references written to {}", entries.len(), out.display());
        }
        Command::Train { dataset } => {
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            let specs: Vec<TrajectorySpec> = match dataset {
                Some(p) => read_manifest(&p)?.into_iter().map(|e| e.spec).collect(),
                None => {
                    let d = &cfg.dataset;
                    sample_dataset(d.count, d.seed, &cfg.quad, d.margin, cfg.train.episode, &d.ranges)?
                        .into_iter()
                        .map(|e| e.spec)
                        .collect()
                }
            };
            let r = &cfg.ren;
            let init = DirectParams::init(r.dims, r.variant(), r.epsilon, r.init_scale, r.init_seed);
            let mut log_file = match &c.out {
                Some(p) => Some(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let outcome = training::train(&cfg.train, &specs, init, r.dims, &cfg.quad, &cfg.gains, |rec| {
                log::info!("iter {} loss {:.3} rmse {:.4} m", rec.iteration, rec.loss, rec.rmse);
                if let Some(f) = log_file.as_mut() {
                    let _ = writeln!(f, "{}", rec.log_line());
                }
            })?;
            let ckpt = c.checkpoint.clone().unwrap_or_else(|| PathBuf::from("ren.ckpt"));
            ren::save_checkpoint(&ckpt, &outcome.params, r.dims)?;
            log::info!("certified rate {:.6}, checkpoint {}", outcome.certificate.rate, ckpt.display());
        }
        Command::Simulate {
            trajectory,
            controller,
            mass_factor,
            tau_factor,
            drag_factor,
            force,
            window,
        } => {
            let weights = load_weights(c.checkpoint.as_deref())?;
            let suite = cfg.bench.named_trajectories();
            let Some((name, traj)) = suite.iter().find(|(n, _)| *n == trajectory).cloned() else {
                let known: Vec<_> = suite.iter().map(|(n, _)| n.to_string()).collect();
                bail!(Error::InvalidParameter(format!(
                    "unknown trajectory `{trajectory}` (one of {})",
                    known.join(", ")
                )));
            };
            if force.as_ref().is_some_and(|f| f.len() != 3) {
                bail!(Error::InvalidParameter("--force takes three components".into()));
            }
            if window.as_ref().is_some_and(|w| w.len() != 2) {
                bail!(Error::InvalidParameter("--window takes a start and an end".into()));
            }
            let controller = match controller {
                ControllerArg::Dfbc => Controller::Dfbc,
                ControllerArg::Ngtc => Controller::Ngtc,
            };
            let spec = ExperimentSpec {
                name,
                controller,
                trajectory: traj,
                perturbation: Perturbation {
                    mass_factor,
                    tau_factor,
                    drag_factor,
                    f_ext: force.map_or([0.0; 3], |f| [f[0], f[1], f[2]]),
                    window: window.map(|w| [w[0], w[1]]),
                },
                duration: cfg.bench.duration,
                seed: c.seed.unwrap_or(cfg.bench.seed),
            };
            let mut harness = Harness::new(&cfg.quad, &cfg.gains, weights.as_ref(), &cfg.bench);
            harness.augmentation = cfg.augmentation.clone();
            let result = bench::run_experiment(&spec, &harness)?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("trace.tsv"));
            bench::emit_traces(&result, &out)?;
            log::info!(
                "{} {}: rmse {:.4} m, peak {:.4} m, crashed {}, saturation {:.3}",
                result.name,
                result.controller.name(),
                result.rmse,
                result.peak_error,
                result.crashed,
                result.saturation
            );
            if result.crashed {
                return Ok(Outcome::CrashDominated);
            }
        }
        Command::BenchAccuracy => {
            if let Some(s) = c.seed {
                cfg.bench.seed = s;
            }
            let weights = load_weights(c.checkpoint.as_deref())?;
            if weights.is_none() {
                log::warn!("no checkpoint given, reporting dfbc only");
            }
            let mut harness = Harness::new(&cfg.quad, &cfg.gains, weights.as_ref(), &cfg.bench);
            harness.augmentation = cfg.augmentation.clone();
            let (rows, table) = bench::bench_accuracy(&cfg.bench, &harness)?;
            emit(c.out.as_deref(), &table.render())?;
            let runs = rows.iter().flat_map(|r| std::iter::once(&r.dfbc).chain(r.ngtc.as_ref()));
            if bench::crash_fraction(runs) > CRASH_DOMINATED {
                return Ok(Outcome::CrashDominated);
            }
        }
        Command::BenchRobustness { trajectories } => {
            if let Some(s) = c.seed {
                cfg.bench.seed = s;
            }
            if let Some(n) = trajectories {
                cfg.bench.trajectories = n;
            }
            let weights = load_weights(c.checkpoint.as_deref())?;
            if weights.is_none() {
                log::warn!("no checkpoint given, reporting dfbc only");
            }
            let mut harness = Harness::new(&cfg.quad, &cfg.gains, weights.as_ref(), &cfg.bench);
            harness.augmentation = cfg.augmentation.clone();
            let (rows, table) = bench::bench_robustness(&cfg.bench, &harness)?;
            emit(c.out.as_deref(), &table.render())?;
            let cells: Vec<_> = rows.iter().flat_map(|r| std::iter::once(&r.dfbc).chain(r.ngtc.as_ref())).collect();
            let mean_crash = cells.iter().map(|c| c.crash_rate).sum::<f64>() / cells.len().max(1) as f64;
            if mean_crash > CRASH_DOMINATED {
                return Ok(Outcome::CrashDominated);
            }
        }
        Command::BenchTiming { iterations } => {
            let n = iterations.unwrap_or(cfg.bench.timing_iterations);
            let weights = match load_weights(c.checkpoint.as_deref())? {
                Some(w) => w,
                None => {
                    let r = &cfg.ren;
                    let p = DirectParams::init(r.dims, r.variant(), r.epsilon, r.init_scale, r.init_seed);
                    ren::materialize(&p, r.dims)?
                }
            };
            let report = bench::bench_timing(n, &cfg.quad, &cfg.gains, &weights, c.seed.unwrap_or(cfg.bench.seed));
            let text = format!(
                "# ngtc-timing 1\ncontroller\tmedian_us\tp99_us\titerations\ndfbc\t{:.3}\t{:.3}\t{n}\nngtc\t{:.3}\t{:.3}\t{n}\n",
                report.dfbc.median_us, report.dfbc.p99_us, report.ngtc.median_us, report.ngtc.p99_us
            );
            emit(c.out.as_deref(), &text)?;
        }
    }
    Ok(Outcome::Done)
}
