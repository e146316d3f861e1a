use proptest::prelude::*;

use ngtc_core::controller::{allocate, kkt_residual, Allocate, Gains, QpAllocator, SmoothAllocator};
use ngtc_core::dynamics::{allocation_map, QuadParams};
use ngtc_core::math::Vec3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn qp_solution_satisfies_kkt(t in 0.0f64..20.0, mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in -0.2f64..0.2) {
        let p = QuadParams::default();
        let g = Gains::default();
        let mu = Vec3::new(mx, my, mz);
        let r = allocate(t, mu, &g, &p);
        prop_assert!(r.thrusts.iter().all(|u| (p.u_min..=p.u_max).contains(u)));
        prop_assert!(kkt_residual(&r.thrusts, t, mu, &g, &p) < 1e-8);
    }

    #[test]
    fn interior_demands_are_reproduced(du in prop::array::uniform4(-0.5f64..0.5)) {
        let p = QuadParams::default();
        let g = Gains::default();
        let u: [f64; 4] = du.map(|d| p.hover_thrust() + d);
        let (t, mu) = allocation_map(&u, &p);
        let r = QpAllocator.allocate(t, mu, &g, &p);
        for i in 0..4 {
            prop_assert!((r.thrusts[i] - u[i]).abs() < 1e-9);
        }
        let s = SmoothAllocator::default().allocate(t, mu, &g, &p);
        for i in 0..4 {
            prop_assert!((s.thrusts[i] - u[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_allocation_stays_in_box(t in 0.0f64..30.0, mx in -2.0f64..2.0, my in -2.0f64..2.0, mz in -0.5f64..0.5) {
        let p = QuadParams::default();
        let s = SmoothAllocator::default().allocate(t, Vec3::new(mx, my, mz), &Gains::default(), &p);
        prop_assert!(s.thrusts.iter().all(|u| u.is_finite() && *u >= p.u_min - 1e-12 && *u <= p.u_max + 1e-12));
    }
}
