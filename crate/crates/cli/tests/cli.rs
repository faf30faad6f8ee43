use std::process::Command;

fn vugen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vugen"))
}

#[test]
fn misspelled_config_field_fails_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\ntrain_itmes = 10\n").unwrap();
    let out = vugen()
        .args(["pretrain-encoder", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train_itmes"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_stage_is_rejected() {
    let out = vugen().args(["train-everything", "--config", "x.toml"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_upstream_checkpoint_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\ntrain_items = 8\nval_items = 8\n").unwrap();
    let out = vugen()
        .args(["sample", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain-encoder"), "{err}");
}

#[test]
fn shipped_configs_load_and_smoke_stage_runs() {
    let configs = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.toml", "desk.toml"] {
        vugen::harness::RunConfig::load(&configs.join(name)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let out = vugen()
        .args(["pretrain-encoder", "--config"])
        .arg(configs.join("smoke.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("manifests/pretrain-encoder.json").exists());
}
