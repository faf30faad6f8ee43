mod common;

use vugen::harness::{replay, run, RunConfig, Stage};
use vugen::Error;

const ORDER: [Stage; 6] = [
    Stage::PretrainEncoder,
    Stage::TrainDecoder,
    Stage::TrainGenerator,
    Stage::Sample,
    Stage::Eval,
    Stage::Sweep,
];

#[test]
fn tiny_pipeline_runs_and_replays() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    for stage in ORDER {
        let m = run(stage, &cfg, dir.path()).unwrap();
        assert!(!m.outputs.is_empty(), "{stage:?}");
        assert_eq!(m.config_hash, cfg.hash().unwrap());
    }
    let root = dir.path();
    assert!(root.join("samples/seed11.png").exists());
    let summary = std::fs::read_to_string(root.join("eval/summary.csv")).unwrap();
    assert!(summary.starts_with("system,efid,density,coverage,alignment"));
    let sweep = std::fs::read_to_string(root.join("sweeps/cfg/result.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");

    let again = tempfile::tempdir().unwrap();
    for stage in &ORDER[..3] {
        let mp = root.join("manifests").join(format!("{}.json", stage.name()));
        assert!(replay(&mp, again.path()).unwrap(), "{stage:?} did not replay");
    }
}

#[test]
fn baseline_stage_trains_both_variants() {
    let mut cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run(Stage::PretrainEncoder, &cfg, dir.path()).unwrap();
    run(Stage::TrainBaseline, &cfg, dir.path()).unwrap();
    cfg.baseline = vugen::baselines::BaselineConfig::repa(&cfg.text, 0.5);
    run(Stage::TrainBaseline, &cfg, dir.path()).unwrap();
    assert!(dir.path().join("baseline-decoupled").exists());
    assert!(dir.path().join("baseline-repa").exists());
}

#[test]
fn downstream_stage_without_upstream_names_the_missing_stage() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let err = run(Stage::TrainDecoder, &cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
    assert!(err.to_string().contains("pretrain-encoder"), "{err}");
}

#[test]
fn misspelled_field_is_rejected_with_its_name() {
    let text = common::TINY_TOML.replace("train_items", "train_itmes");
    let err = RunConfig::from_toml(&text).unwrap_err().to_string();
    assert!(err.contains("train_itmes"), "{err}");
}
