use qgs_pmu::datagen::{build_dataset, Dataset, ScenarioConfig, FEATURES_FILE};

#[test]
fn dataset_survives_a_disk_round_trip() {
    let cfg = ScenarioConfig {
        experiments_per_class: 4,
        training_per_class: 3,
        noise_variance: 0.01,
        seed: 12,
        ..Default::default()
    };
    let ds = build_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = ds.write(dir.path()).unwrap();
    let (back, manifest) = Dataset::read(dir.path()).unwrap();
    assert_eq!(manifest.features_digest, written.features_digest);
    assert_eq!(back.features_csv().unwrap(), ds.features_csv().unwrap());
    assert_eq!(back.feature_config_digest(), ds.feature_config_digest());
    assert_eq!(back.train.len(), 13 * 3);
    assert_eq!(back.eval.len(), 13);
}

#[test]
fn tampered_features_are_detected() {
    let ds = build_dataset(&ScenarioConfig {
        experiments_per_class: 3,
        training_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join(FEATURES_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    let last = text.lines().last().unwrap().to_owned();
    text.push_str(&last);
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert!(Dataset::read(dir.path()).is_err());
}
