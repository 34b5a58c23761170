use std::path::Path;
use std::process::{Command, Output};

fn smto(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smto"))
        .args(args)
        .env("SMTO_OUT", out)
        .output()
        .expect("spawn smto")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_json_and_csv_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = smto(
        &["--threads", "2", "run", "--problem", "symmetric_two_task", "--smto", "pcgrad", "--epochs", "2", "--seeds", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sub = dir.path().join("symmetric_two_task");
    for s in 0..2 {
        assert!(sub.join(format!("pcgrad_seed{s}.json")).exists());
        assert!(sub.join(format!("pcgrad_seed{s}.csv")).exists());
    }
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn config_file_is_used_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("trial.toml");
    std::fs::write(
        &cfg,
        "epochs = 1\nseed = 4\n[problem]\nkind = \"conflict_regression\"\nsize = 120\n[smto]\nmethod = \"cagrad\"\nc = 0.5\n",
    )
    .unwrap();
    let o = smto(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = dir.path().join("conflict_regression/cagrad_seed4.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["config"]["smto"]["c"], 0.5);
    assert_eq!(v["schema_version"], 1);

    std::fs::write(&cfg, "epochs = 1\ntypo = 3\n[problem]\nkind = \"conflict_regression\"\nsize = 120\n[smto]\nmethod = \"edm\"\n")
        .unwrap();
    let o = smto(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo"));
}

#[test]
fn out_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = smto(
        &["run", "--problem", "conflict_regression", "--smto", "unit_scal", "--epochs", "1", "--out", flag_dir.path().to_str().unwrap()],
        env_dir.path(),
    );
    assert!(o.status.success());
    assert!(flag_dir.path().join("conflict_regression/unit_scal_seed0.json").exists());
    assert!(!env_dir.path().join("conflict_regression").exists());
}

#[test]
fn grid_compare_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "lr = [0.01, 0.001]\ndropout_p = [0.0]\n").unwrap();
    let o = smto(
        &[
            "grid", "--problem", "conflict_regression", "--smto", "edm", "--epochs", "2", "--grid",
            grid.to_str().unwrap(), "--seeds-final", "1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = dir.path().join("conflict_regression/grid_edm/grid.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 2);

    let o = smto(
        &["compare", "--problems", "symmetric_two_task", "--smtos", "unit_scal,nash_mtl", "--seeds", "2", "--epochs", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("symmetric_two_task/comparison.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let smtos = v["smtos"].as_array().unwrap();
    assert_eq!(smtos.len(), 2);
    assert_eq!(smtos[1]["delta_mtm"].as_array().unwrap().len(), 2);
    assert!(smtos[0]["delta_quantiles"]["median"].is_number());

    let o = smto(&["run", "--problem", "conflict_regression", "--smto", "nash_mtl", "--epochs", "2"], dir.path());
    assert!(o.status.success());
    let trial = dir.path().join("conflict_regression/nash_mtl_seed0.json");
    let o = smto(&["extract-replay", "--trial", trial.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("fixed weights"));
    assert!(dir.path().join("conflict_regression/replay/fixed_seed0.json").exists());
}

#[test]
fn missing_ids_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = smto(&["run", "--problem", "symmetric_two_task"], dir.path());
    assert!(!o.status.success());
    let o = smto(&["run", "--problem", "nope", "--smto", "edm"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown problem"));
}
