use proptest::prelude::*;

use ngtc_core::dynamics::QuadParams;
use ngtc_core::trajectory::{
    feasibility_classify, read_manifest, sample_dataset, sample_reference, write_manifest, LissajousRanges, ReferenceTrack,
    TrajectorySpec,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lissajous_derivatives_are_consistent(
        amp in prop::array::uniform3(0.0f64..5.0),
        freq in prop::array::uniform3(0.0f64..3.0),
        phase in prop::array::uniform3(0.0f64..6.28),
        t in 0.1f64..3.0,
    ) {
        let spec = TrajectorySpec::lissajous(amp, freq, phase, 4.0);
        let h = 1e-5;
        let at = |t: f64| spec.sample(t);
        let (a, b, c) = (at(t - h), at(t), at(t + h));
        for i in 0..3 {
            let tol = 1e-5 * (1.0 + amp[i] * freq[i].powi(4));
            prop_assert!(((c.x[i] - a.x[i]) / (2.0 * h) - b.v[i]).abs() < tol);
            prop_assert!(((c.v[i] - a.v[i]) / (2.0 * h) - b.a[i]).abs() < tol);
            prop_assert!(((c.a[i] - a.a[i]) / (2.0 * h) - b.j[i]).abs() < tol);
        }
    }

    #[test]
    fn heading_stays_wrapped(amp in prop::array::uniform3(0.0f64..5.0), freq in prop::array::uniform3(0.0f64..3.0)) {
        let spec = TrajectorySpec::lissajous(amp, freq, [0.3, 1.1, 0.0], 4.0);
        let track = ReferenceTrack::build(&spec, 0.01);
        prop_assert!(track.samples.iter().all(|r| r.psi.abs() <= std::f64::consts::PI && r.is_finite()));
    }
}

#[test]
fn dataset_is_seeded_and_feasible() {
    let p = QuadParams::default();
    let ranges = LissajousRanges::default();
    let a = sample_dataset(16, 4, &p, 0.1, 4.0, &ranges).unwrap();
    let b = sample_dataset(16, 4, &p, 0.1, 4.0, &ranges).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_dataset(16, 5, &p, 0.1, 4.0, &ranges).unwrap());
    for e in &a {
        let f = feasibility_classify(&e.spec, &p, 0.1);
        assert!(f.feasible);
        assert_eq!(f.peak_ratio, e.peak_ratio);
    }
    // Larger sets extend smaller ones: draws are indexed streams.
    let c = sample_dataset(24, 4, &p, 0.1, 4.0, &ranges).unwrap();
    assert_eq!(&c[..16], &a[..]);
}

#[test]
fn manifest_round_trip() {
    let p = QuadParams::default();
    let entries = sample_dataset(8, 2, &p, 0.1, 4.0, &LissajousRanges::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.txt");
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}

#[test]
fn reference_track_matches_direct_sampling() {
    let spec = TrajectorySpec::lissajous([3.0, 2.0, 0.5], [1.0, 2.0, 0.5], [0.0, 1.0, 2.0], 2.0);
    let track = ReferenceTrack::build(&spec, 0.01);
    assert_eq!(track.steps(), 200);
    let mut psi = 0.0;
    for k in 0..=track.steps() {
        let r = sample_reference(&spec, k as f64 * 0.01, psi);
        assert_eq!(&r, track.at(k));
        psi = r.psi;
    }
}
