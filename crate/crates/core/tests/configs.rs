use std::path::PathBuf;

use duoseg_core::experiment::ExperimentConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(again.to_toml().unwrap(), c.to_toml().unwrap());
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn full_config_matches_protocol() {
    let c = ExperimentConfig::load(&configs_dir().join("full.toml")).unwrap();
    assert_eq!(c.roi, [160, 160, 64]);
    assert_eq!(
        (c.phantom.splits.train, c.phantom.splits.val, c.phantom.splits.test),
        (504, 72, 144)
    );
    assert_eq!(c.segmentation.patience, 10);
    assert_eq!(c.synthetic_count(), 504);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = std::fs::read_to_string(configs_dir().join("smoke.toml")).unwrap();
    let bad = text.replacen("seed = 7", "seed = 7\nsede = 8", 1);
    assert!(ExperimentConfig::from_toml(&bad).is_err());
}
