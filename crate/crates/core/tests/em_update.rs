mod common;

use common::*;
use hympc_core::search::em_update;
use proptest::prelude::*;

#[test]
fn closed_form_matches_numerical_maximizer() {
    let r = em_report(100, 3);
    println!("{r:?}");
    assert!(r.mu_err < 1e-6);
    assert!(r.sigma_err < 1e-6);
    assert!(r.shift_err < 1e-12);
    assert_eq!(r.hull_violations, 0);
}

proptest! {
    #[test]
    fn mean_stays_in_hull_and_sigma_floored(
        samples in prop::collection::vec((0.0f64..=1.0, -100.0f64..0.0), 2..12),
        zeta in 0.1f64..10.0,
    ) {
        let p = em_update(&samples, zeta, 1e-3).unwrap();
        let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.mu >= lo - 1e-12 && p.mu <= hi + 1e-12);
        prop_assert!(p.sigma >= 1e-3);
    }
}
