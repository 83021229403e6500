use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn useg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_useg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, fast experiment.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "seed": 5,
  "phantom": {{"size": 16, "radius": [2.0, 3.5]}},
  "dataset": {{"count": 10}},
  "model": {{"hidden": [4, 6]}},
  "teacher": {{"epochs": 3}},
  "distill": {{"epochs": 1, "q": 2}}{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b, &a] {
        let o = useg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a.join("dataset")), tree(&b.join("dataset")));
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 1 + 10 * 5);
    assert!(!a.join(useg::cli::LOCK_FILE).exists());
}

#[test]
fn single_sample_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.json");
    fs::write(&cfg, r#"{"seed": 1, "dataset": {"count": 1}}"#).unwrap();
    let out1 = dir.path().join("one");
    assert_eq!(code(&useg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()])), 0);
    for view in ["images", "labels_full", "labels_organ1", "labels_organ2", "labels_organ3"] {
        assert_eq!(fs::read_dir(out1.join("dataset").join(view)).unwrap().count(), 1, "{view}");
    }
}

#[test]
fn validation_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = useg(&["generate", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "distill": {"lambda2": -3}}"#).unwrap();
    let o = useg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("distill"), "{}", stderr(&o));
    assert!(!out.exists(), "validation must precede writes");

    fs::write(&cfg, r#"{"seed": 1, "phantom": {"size": "big"}}"#).unwrap();
    let o = useg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("phantom.size"), "{}", stderr(&o));

    assert_eq!(code(&useg(&["no-such-command"])), 1);
    assert_eq!(code(&useg(&["distill", "--seed", "1", "--uncertainty", "sometimes"])), 1);
    assert_eq!(code(&useg(&["--help"])), 0);
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let o_ = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", c, "--out", o_]);
        let o = useg(&all);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };

    // Training before generation is a typed failure.
    let o = useg(&["train-teacher", "--config", c, "--out", o_]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    run(&["generate"]);
    let printed = run(&["train-teacher"]);
    assert!(printed.contains("organ 2"));
    let mut log = csv::Reader::from_path(out.join("teacher_log.csv")).unwrap();
    assert_eq!(log.headers().unwrap().iter().collect::<Vec<_>>(), ["epoch", "l_total", "l_old", "l_new", "mean_u", "dice_organ1", "dice_organ2"]);
    assert_eq!(log.records().count(), 3);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("teacher_eval.json")).unwrap()).unwrap();
    assert_eq!(report["organs"], serde_json::json!([1, 2]));
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);

    run(&["distill", "--uncertainty", "off"]);
    let mut log = csv::Reader::from_path(out.join("distill/off/log.csv")).unwrap();
    let row = log.records().next().unwrap().unwrap();
    assert_eq!(&row[4], "", "off mode runs no ensemble");
    run(&["distill"]);
    assert!(out.join("distill/as-paper/student.useg").exists());

    let printed = run(&["evaluate", "--model", out.join("distill/as-paper/student.useg").to_str().unwrap()]);
    assert!(printed.contains("organ 3"));

    run(&["ablate"]);
    let mut ab = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let header: Vec<String> = ab.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["variant", "dice_organ1", "dice_organ2", "dice_organ3", "old_mean", "new_dice", "mean"]);
    let rows: Vec<csv::StringRecord> = ab.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(names, ["as-paper", "normalized", "confidence", "off", "new-task-only"]);
    assert!(rows.iter().all(|r| r.len() == header.len()));

    // The ablation's as-paper variant repeats the plain distill run exactly.
    assert_eq!(
        fs::read(out.join("ablation/as-paper/student.useg")).unwrap(),
        fs::read(out.join("distill/as-paper/student.useg")).unwrap()
    );
}

#[test]
fn mismatched_teacher_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let (c, o_) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&useg(&["generate", "--config", c, "--out", o_])), 0);
    let wrong = dir.path().join("wrong.useg");
    let mut mc = useg::SegModelConfig::new(2);
    mc.hidden = vec![4, 6];
    useg::SegModel::init_random(mc, 1).unwrap().save(&wrong).unwrap();
    let o = useg(&["distill", "--config", c, "--out", o_, "--teacher", wrong.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
    assert!(!out.join("distill").exists());
}

#[test]
fn corrupt_manifest_and_lock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let (c, o_) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&useg(&["generate", "--config", c, "--out", o_])), 0);

    fs::write(out.join(useg::cli::LOCK_FILE), "1").unwrap();
    let o = useg(&["generate", "--config", c, "--out", o_]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
    fs::remove_file(out.join(useg::cli::LOCK_FILE)).unwrap();

    fs::write(out.join("dataset/manifest.json"), r#"{"version": 1, "seed": 5, "count": "many"}"#).unwrap();
    let o = useg(&["train-teacher", "--config", c, "--out", o_]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("count"), "{}", stderr(&o));
}

#[test]
fn gradcheck_command() {
    let o = useg(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("at layer"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&text[..text.rfind('}').unwrap() + 1]).unwrap();
    assert!(json["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(json["worst_layer"].is_u64());

    let o = useg(&["gradcheck", "--seed", "3", "--h", "1e-4", "--tol", "1e-30"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&useg(&["gradcheck", "--h", "-1"])), 1);
}
