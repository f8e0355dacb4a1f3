use std::path::Path;
use std::process::{Command, Output};

use cofipara::core::{checkpoint::Checkpoint, CofiPara, Phase, TrainConfig};
use cofipara::{checkpoint_io, config_io, fixtures};

fn cofipara(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cofipara")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = cofipara(&["train-everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn finetune_needs_a_checkpoint_or_scratch_flag() {
    let o = cofipara(&["finetune", "--data", "x", "--images", "y", "--out", "z"]);
    assert!(!o.status.success());
}

#[test]
fn missing_rationales_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::tiny();
    fixtures::write_overfit(dir.path(), cfg.image_size).unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, config_io::to_toml(&cfg)).unwrap();

    let out = dir.path().join("run");
    let o = cofipara(&[
        "pretrain",
        "--config",
        s(&cfg_path),
        "--data",
        s(&dir.path().join("msd.jsonl")),
        "--images",
        s(&dir.path().join("images")),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("error[E_VALIDATION]"), "{err}");
    assert!(!out.join("final.ckpt").exists());
}

#[test]
fn zero_epoch_pretrain_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::tiny() };
    fixtures::write_overfit(dir.path(), cfg.image_size).unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, config_io::to_toml(&cfg)).unwrap();
    let images = dir.path().join("images");
    let augmented = dir.path().join("msd_r.jsonl");

    let o = cofipara(&[
        "rationales",
        "--data",
        s(&dir.path().join("msd.jsonl")),
        "--images",
        s(&images),
        "--cache",
        s(&dir.path().join("cache.jsonl")),
        "--out",
        s(&augmented),
        "--phase",
        "pretrain",
        "--config",
        s(&cfg_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("run");
    let o = cofipara(&[
        "pretrain",
        "--config",
        s(&cfg_path),
        "--data",
        s(&augmented),
        "--images",
        s(&images),
        "--out",
        s(&out),
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let saved = checkpoint_io::load(&out.join("final.ckpt")).unwrap();
    let seeded = TrainConfig { seed: 9, ..cfg };
    let init = Checkpoint::from_model(&CofiPara::new(seeded).unwrap(), Phase::Pretrain, 0);
    assert_eq!(saved, init);

    let report = dir.path().join("report.json");
    let o = cofipara(&[
        "evaluate",
        "--checkpoint",
        s(&out.join("final.ckpt")),
        "--data",
        s(&augmented),
        "--images",
        s(&images),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json.get("msd_accuracy").is_some(), "{json}");
}
