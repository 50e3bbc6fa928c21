use qgs_pmu::network::NetworkShape;
use qgs_pmu::qgs::testing::double_well;
use qgs_pmu::qgs::{enumerate_minima, ConstraintSystem, MinimaSet, QgsSettings, StabilityTag};
use qgs_pmu::training::fixtures::{xor, xor_qgs_settings};
use qgs_pmu::training::{train_qgs, TrainConfig};

#[test]
fn double_well_minima_are_sorted_stable_and_distinct() {
    let sys = ConstraintSystem::new(double_well()).unwrap();
    let settings = QgsSettings {
        target_minima: 2,
        seed: 4,
        ..Default::default()
    };
    let set = enumerate_minima(&sys, &[0.3], &settings).unwrap();
    assert_eq!(set.items.len(), 2);
    assert!(set.items[0].cost <= set.items[1].cost);
    for e in &set.items {
        assert!(e.grad_norm <= settings.grad_tol);
        assert_eq!(e.stability.tag, StabilityTag::Stable);
    }
    assert!((set.items[0].point[0] - set.items[1].point[0]).abs() > 1.0);

    let back = MinimaSet::from_json(&set.to_json()).unwrap();
    assert_eq!(back.to_json(), set.to_json());
}

#[test]
fn xor_training_is_seed_reproducible() {
    let shape = NetworkShape::new(2, 4, 2).unwrap();
    let cfg = TrainConfig {
        target_minima: 3,
        seed: 9,
        ..Default::default()
    };
    let (a, ma) = train_qgs(&xor(), shape, &cfg, &xor_qgs_settings()).unwrap();
    let (b, mb) = train_qgs(&xor(), shape, &cfg, &xor_qgs_settings()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(ma.to_json(), mb.to_json());
    assert!(!ma.items.is_empty());
}
