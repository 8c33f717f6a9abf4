mod common;

use common::*;
use hympc_core::dynamics::{DroneState, GateObservation};
use hympc_core::math::Vec3;
use hympc_core::search::{classify, reward, RewardConfig, VerdictClass};
use proptest::prelude::*;

#[test]
fn constructed_crossings() {
    for (name, ok) in classification_cases() {
        assert!(ok, "{name}");
    }
}

#[test]
fn earlier_traversal_scores_higher() {
    assert!(traversal_time_monotone());
}

proptest! {
    #[test]
    fn crossing_class_follows_error(y in -1.0f64..1.0, z in 0.0f64..2.0) {
        let gates = vec![GateObservation { center: Vec3::new(2.0, 0.0, 1.0), center_vel: Vec3::ZERO }; 3];
        let states: Vec<DroneState> =
            [1.5, 2.0, 2.5].iter().map(|&x| DroneState::at_rest(Vec3::new(x, y, z))).collect();
        let v = classify(&states, &gates, Vec3::new(1.0, 0.0, 0.0), 0.3).unwrap();
        let e = (y * y + (z - 1.0).powi(2)).sqrt();
        prop_assert_eq!(v.crossing, Some(1));
        prop_assert_eq!(v.class == VerdictClass::Success, e < 0.3);
        let r = reward(&states, &gates, &v, 0.5, &RewardConfig::default(), D);
        prop_assert!(r <= -0.5);
    }
}
