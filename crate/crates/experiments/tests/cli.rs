use std::fs;
use std::process::Command;

fn l2p() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_l2p"));
    c.env_remove("L2P_OUT_DIR");
    c
}

const TINY: &str = r#"
name = "cli"
pretrain_samples_per_class = 3
[backbone]
embed_dim = 8
key_dim = 8
depth = 1
heads = 2
[pretrain]
epochs = 1
[setting]
kind = "class_incremental"
tasks = 2
classes_per_task = 2
train_per_class = 4
test_per_class = 2
[learner]
pool_size = 4
top_n = 2
prompt_length = 1
epochs = 1
"#;

#[test]
fn invalid_config_exits_nonzero_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[learner]\ntop_n = 30\n").unwrap();
    let out = l2p().arg("run").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("top_n"), "{err}");
}

#[test]
fn run_then_histogram_with_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = l2p()
        .env("L2P_OUT_DIR", dir.path().join("env-root"))
        .args(["run", cfg.to_str().unwrap(), "--seed", "2", "--ablation", "no_diversify"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("env-root").join("cli-no_diversify-s2");
    let record = run_dir.join("record.json");
    assert!(record.exists());

    let csv = dir.path().join("hist.csv");
    let out = l2p().args(["histogram", record.to_str().unwrap(), csv.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task,0,1,2,3");
    assert_eq!(lines.len(), 3);
    let jaccard = fs::read_to_string(dir.path().join("hist-jaccard.csv")).unwrap();
    assert_eq!(jaccard.lines().next().unwrap(), "task,0,1");
    assert!(jaccard.lines().nth(1).unwrap().starts_with("0,1.0000,"));
}

#[test]
fn flag_beats_environment_and_resume_checks_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let flagged = dir.path().join("flag-root");
    let out = l2p()
        .env("L2P_OUT_DIR", dir.path().join("env-root"))
        .args(["run", cfg.to_str().unwrap(), "--out-dir", flagged.to_str().unwrap(), "--stop-after", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("env-root").exists());
    let ckpt = flagged.join("cli-full-s0").join("checkpoints").join("task-001.json");
    assert!(ckpt.exists());

    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("epochs = 1\n\"#", "epochs = 2\n\"#").replace("[learner]\n", "[learner]\nlr = 0.01\n")).unwrap();
    let out = l2p().args(["resume", ckpt.to_str().unwrap(), "--config", other.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to resume"));

    let out = l2p().args(["resume", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(flagged.join("cli-full-s0").join("metrics.json").exists());
}
