use std::path::Path;

use speech_engine::config::Averaging;
use speech_engine::parse_config;

fn load(name: &str) -> speech_engine::ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = parse_config(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn shipped_configs_parse_and_validate() {
    let lid = load("lid_durations.toml");
    assert_eq!(lid.protocol.durations, vec![0.3, 1.0, 2.0]);
    let ser = load("ser_5fold.toml");
    assert_eq!(ser.protocol.folds, 5);
    let low = load("low_data_sweep.toml");
    assert_eq!(low.protocol.sweep_points(), vec![Some(25), Some(50), Some(100), Some(200), None]);
    assert_eq!(low.protocol.averaging, Averaging::BestPlusStep { step: 200 });
}
