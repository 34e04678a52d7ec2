use std::path::Path;
use std::process::{Command, Output};

fn planlens(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planlens"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .env_remove("PLANLENS_RUN_ROOT")
        .env_remove("PLANLENS_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 14] = [
    "--set",
    "budget_per_cell=40",
    "--set",
    "n_layers=1",
    "--set",
    "d_model=16",
    "--set",
    "d_ff=32",
    "--set",
    "n_heads=2",
    "--set",
    "epochs=1",
    "--set",
    "eval_every=0",
];

#[test]
fn report_all_on_fresh_dir_names_train() {
    let dir = tempfile::tempdir().unwrap();
    let o = planlens(dir.path(), &["report-all"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("`train`"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_names_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = planlens(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`gen-data`"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen-data", "--set", "no_such_key=1"],
        vec!["gen-data", "--colors", "3,4"],
        vec!["gen-data", "--set", "epochs"],
        vec!["eval", "--level", "L9"],
        vec!["frobnicate"],
    ] {
        let o = planlens(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = fast\n").unwrap();
    let o = planlens(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let mut args = vec!["gen-data", "--colors", "4", "--seed", "7"];
    args.extend(TINY);
    let o = planlens(run, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("blocks"));
    assert!(table.contains("4 blocks"));
    assert!(run.join("data/dataset.jsonl").exists());
    let saved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("seed = 7"));
    assert!(saved.contains("d_model = 16"));

    let o = planlens(run, &["train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("checkpoints/model.ckpt").exists());

    let o = planlens(run, &["eval", "--level", "L1", "--colors", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let s_step = v["s_step"].as_f64().unwrap();
    let s_plan = v["s_plan"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s_step) && (0.0..=1.0).contains(&s_plan));
    assert!(run.join("analysis/eval/test_L1_4blocks.json").exists());

    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for stage in ["gen-data", "train", "eval"] {
        assert!(m["stages"][stage].is_object(), "{stage}");
    }
    assert_eq!(m["seeds"]["data"], 7);
    assert!(m["checkpoint_hash"].is_string());
    let files = m["files"].as_object().unwrap();
    assert!(files.contains_key("data/dataset.jsonl"));
    assert!(files.contains_key("config.txt"));

    // Regenerating identical data is flagged as a reproduction.
    let o = planlens(run, &["gen-data"]);
    assert!(o.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["stages"]["gen-data"]["reproduction"], true);
}
