use ngtc_core::bench::{
    emit_traces, read_traces, rmse_from_trace, run_experiment, BenchConfig, Controller, ExperimentSpec, Harness,
    Perturbation, TimingStats, TRACE_SCHEMA,
};
use ngtc_core::controller::Gains;
use ngtc_core::dynamics::QuadParams;
use ngtc_core::ren::{materialize, DirectParams, RenDims, Variant};
use ngtc_core::trajectory::TrajectorySpec;
use ngtc_core::Error;

fn spec(name: &str, controller: Controller, trajectory: TrajectorySpec, duration: f64) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        controller,
        trajectory,
        perturbation: Perturbation::default(),
        duration,
        seed: 1,
    }
}

#[test]
fn hover_run_is_accurate_and_traced() {
    let p = QuadParams::default();
    let g = Gains::default();
    let b = BenchConfig::default();
    let h = Harness::new(&p, &g, None, &b);
    let r = run_experiment(&spec("hover", Controller::Dfbc, TrajectorySpec::hover([0.0, 0.0, 2.0], 3.0), 3.0), &h).unwrap();
    assert!(r.rmse < 0.01, "rmse {}", r.rmse);
    assert!(!r.crashed);
    assert_eq!(r.trace.len(), 301);
    assert_eq!(r.trace[300].t, 3.0);
}

#[test]
fn runs_are_deterministic() {
    let p = QuadParams::default();
    let g = Gains::default();
    let b = BenchConfig::default();
    let dims = RenDims::default();
    let w = materialize(&DirectParams::init(dims, Variant::Contracting, 1e-4, 0.5, 4), dims).unwrap();
    let h = Harness::new(&p, &g, Some(&w), &b);
    let (_, loop_spec) = b.named_trajectories().into_iter().find(|(n, _)| n == "hor-loop").unwrap();
    for c in [Controller::Dfbc, Controller::Ngtc] {
        let s = spec("hor-loop", c, loop_spec.clone(), 3.0);
        let a = run_experiment(&s, &h).unwrap();
        assert!(a.same_outcome(&run_experiment(&s, &h).unwrap()));
    }
}

#[test]
fn disabled_augmentation_reproduces_dfbc() {
    let p = QuadParams::default();
    let g = Gains::default();
    let b = BenchConfig::default();
    let dims = RenDims::default();
    let w = materialize(&DirectParams::init(dims, Variant::Contracting, 1e-4, 1.0, 4), dims).unwrap();
    let mut h = Harness::new(&p, &g, Some(&w), &b);
    h.augmentation.enabled = false;
    let traj = b.step_circle();
    let dfbc = run_experiment(&spec("c", Controller::Dfbc, traj.clone(), 4.0), &h).unwrap();
    let ngtc = run_experiment(&spec("c", Controller::Ngtc, traj, 4.0), &h).unwrap();
    assert_eq!(dfbc.trace, ngtc.trace);
}

#[test]
fn trace_round_trip_preserves_rmse() {
    let p = QuadParams::default();
    let g = Gains::default();
    let b = BenchConfig::default();
    let h = Harness::new(&p, &g, None, &b);
    let mut s = b.step_experiment(Controller::Dfbc);
    s.duration = 4.0;
    s.perturbation.window = Some([1.0, 2.0]);
    let r = run_experiment(&s, &h).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.tsv");
    emit_traces(&r, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with(TRACE_SCHEMA));
    let rows = read_traces(&path).unwrap();
    assert_eq!(rows, r.trace);
    assert_eq!(rmse_from_trace(&rows, r.dt, r.transient).to_bits(), r.rmse.to_bits());
    // the force acts only inside its window
    assert!(rows.iter().all(|row| (row.f_ext[1] != 0.0) == (row.t > 1.0 && row.t <= 2.0 + 1e-9)));
}

#[test]
fn ngtc_without_weights_is_an_error() {
    let p = QuadParams::default();
    let g = Gains::default();
    let b = BenchConfig::default();
    let h = Harness::new(&p, &g, None, &b);
    let r = run_experiment(&spec("x", Controller::Ngtc, TrajectorySpec::hover([0.0; 3], 1.0), 1.0), &h);
    assert!(matches!(r, Err(Error::Checkpoint(_))));
}

#[test]
fn timing_stats_percentiles() {
    let s = TimingStats::from_samples((1..=100).rev().map(f64::from).collect());
    assert_eq!(s.median_us, 51.0);
    assert_eq!(s.p99_us, 99.0);
}
