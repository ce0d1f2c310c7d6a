use std::path::Path;
use std::process::{Command, Output};

fn tstbt(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tstbt"))
        .args(args)
        .env("TSTBT_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let cfg = stdout(&tstbt(&["config", "--smoke"], &dir.join("cache")));
    let path = dir.join("smoke.json");
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn config_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = stdout(&tstbt(&["config", "--set", "train.max_steps=17", "--set", "mix_ratio=1.5", "--seed", "9"], &cache));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["train"]["max_steps"], 17);
    assert_eq!(v["mix_ratio"], 1.5);
    assert_eq!(v["seed"], 9);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    assert_eq!(tstbt(&["config", "--set", "nosuch.field=1"], &cache).status.code(), Some(2));
    assert_eq!(tstbt(&["config", "--set", "mix_ratio=-1"], &cache).status.code(), Some(2));
    assert_eq!(tstbt(&["evaluate", "--variant", "warp"], &cache).status.code(), Some(2));
    assert_eq!(tstbt(&["evaluate", "--config", "/nonexistent.json"], &cache).status.code(), Some(3));
}

#[test]
fn missing_data_files_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let data = format!(
        "data={{\"kind\":\"files\",\"dir\":{:?},\"source_language\":\"src\",\"target_language\":\"tgt\"}}",
        empty.to_str().unwrap()
    );
    let o = tstbt(&["generate", "--config", &cfg, "--set", &data, "--output-dir", dir.path().to_str().unwrap()], &dir.path().join("cache"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    stdout(&tstbt(&["generate", "--config", &cfg, "--output-dir", o], &cache));
    assert!(out.join("data/bitext.src").exists());
    stdout(&tstbt(&["train", "--config", &cfg, "--output-dir", o], &cache));
    assert!(out.join("models/s2t.ckpt").exists() && out.join("models/t2s.ckpt").exists());
    stdout(&tstbt(&["augment", "--config", &cfg, "--output-dir", o, "--variant", "tagged"], &cache));
    assert!(out.join("synthetic/tagged.src").exists() && out.join("synthetic/tagged.meta.json").exists());
    stdout(&tstbt(&["tst", "--config", &cfg, "--output-dir", o], &cache));
    assert!(out.join("models/tst.ckpt").exists());
    stdout(&tstbt(&["ctst", "--config", &cfg, "--output-dir", o], &cache));
    assert!(out.join("models/system.ckpt").exists());
    stdout(&tstbt(&["mix", "--config", &cfg, "--output-dir", o, "--variant", "beam"], &cache));
    assert!(out.join("train.prov").exists());
}

#[test]
fn run_all_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cache = dir.path().join("cache");
    let out = dir.path().join("runs");
    let table = stdout(&tstbt(
        &["run-all", "--config", &cfg, "--variants", "bitext,beam+cascade", "--output-dir", out.to_str().unwrap()],
        &cache,
    ));
    assert!(table.contains("bitext") && table.contains("beam+cascade"), "{table}");
    assert!(out.join("report.md").exists() && out.join("report.csv").exists());
    let m = out.join("beam+cascade/manifest.json");
    let again = stdout(&tstbt(&["report", m.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()], &cache));
    assert!(again.contains("beam+cascade"));
    assert!(dir.path().join("report.csv").exists());
}
