//! Runs the `mibounds` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn mibounds(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mibounds"))
        .args(args)
        .current_dir(dir)
        .env_remove("MIBOUNDS_OUT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Header and data lines of a CSV file, with the `#` config lines dropped.
fn csv_body(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

fn column(lines: &[String], name: &str) -> Vec<String> {
    let header: Vec<&str> = lines[0].split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines[1..]
        .iter()
        .map(|l| l.split(',').nth(k).unwrap().to_string())
        .collect()
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["estimate", "benchmark", "minimize", "timing"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn unknown_estimator_lists_the_valid_ids() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(dir.path(), &["estimate", "--estimator", "clubb"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vclub-s"), "{}", stderr(&o));
}

#[test]
fn known_conditional_is_refused_on_the_cubic_task() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &["estimate", "--estimator", "club", "--task", "cubic"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("trace.csv").exists());
}

#[test]
fn estimate_writes_trace_and_quality() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "estimate",
        "--estimator",
        "vclub",
        "--task",
        "gaussian",
        "--levels",
        "0",
        "--seed",
        "7",
        "--iters-per-level",
        "400",
    ];
    let o = mibounds(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let q = csv_body(&dir.path().join("quality.csv"));
    assert_eq!(q[0], "estimator,task,level,bias,variance,mse");
    assert_eq!(q.len(), 2);
    let bias: f64 = column(&q, "bias")[0].parse().unwrap();
    assert!(bias.abs() < 0.3, "{bias}");
    let t = csv_body(&dir.path().join("trace.csv"));
    assert_eq!(t[0], "estimator,task,iter,level,estimate");
    assert_eq!(t.len(), 401);
    let text = std::fs::read_to_string(dir.path().join("quality.csv")).unwrap();
    assert!(text.contains("# seed=7"));
    assert!(text.contains("# learning_rate=0.005"));

    // A second identical run reproduces both files byte for byte.
    let again = tempfile::tempdir().unwrap();
    assert_eq!(mibounds(again.path(), &args).status.code(), Some(0));
    for f in ["quality.csv", "trace.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn divergence_is_fatal_for_a_single_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &[
            "estimate",
            "--estimator",
            "nwj",
            "--task",
            "cubic",
            "--levels",
            "2",
            "--iters-per-level",
            "200",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("iteration"), "{}", stderr(&o));
}

#[test]
fn benchmark_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &[
            "benchmark",
            "--estimators",
            "club,vclub-s,nwj",
            "--levels",
            "2,4",
            "--iters-per-level",
            "100",
            "--jobs",
            "2",
            "--format",
            "csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let q = csv_body(&dir.path().join("quality.csv"));
    assert_eq!(q[0], "estimator,task,level,bias,variance,mse,status");
    assert_eq!(q.len() - 1, 3 * 2 * 2);
    let status = column(&q, "status");
    let est = column(&q, "estimator");
    let task = column(&q, "task");
    for k in 0..status.len() {
        match (est[k].as_str(), task[k].as_str()) {
            ("club", "cubic") => assert_eq!(status[k], "failed"),
            ("nwj", "cubic") => assert_eq!(status[k], "diverged"),
            _ => assert_eq!(status[k], "ok"),
        }
    }
}

#[test]
fn benchmark_narrows_to_one_estimator_and_pools_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &[
            "benchmark",
            "--estimators",
            "vclub",
            "--tasks",
            "gaussian",
            "--levels",
            "2",
            "--iters-per-level",
            "50",
            "--seeds",
            "2",
            "--format",
            "json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("quality.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 1);
    assert_eq!(doc["config"]["seeds"], 2);
    assert_eq!(doc["config"]["seed"], 0);
}

#[test]
fn minimize_reduces_the_channel_information() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &[
            "minimize",
            "--estimator",
            "vclub-s",
            "--init-mi",
            "2.0",
            "--dim",
            "4",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = csv_body(&dir.path().join("minimize.csv"));
    assert_eq!(m[0], "iter,estimate,true_mi");
    assert_eq!(m.len() - 1, 2000);
    let last: f64 = column(&m, "true_mi").last().unwrap().parse().unwrap();
    assert!(last < 0.3, "{last}");
}

#[test]
fn minimize_without_sampling_and_from_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &[
            "minimize",
            "--estimator",
            "vclub",
            "--no-sampling",
            "--max-iters",
            "100",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("minimize.csv")).unwrap();
    assert!(text.contains("# estimator=vclub\n") && text.contains("# sampling=false"));

    let o = mibounds(
        dir.path(),
        &["minimize", "--init-mi", "0", "--max-iters", "500"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = csv_body(&dir.path().join("minimize.csv"));
    for v in column(&m, "true_mi").iter().filter(|v| !v.is_empty()) {
        assert!(v.parse::<f64>().unwrap() < 0.05, "{v}");
    }

    let o = mibounds(dir.path(), &["minimize", "--estimator", "club"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn timing_rows_follow_the_batch_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = mibounds(
        dir.path(),
        &["timing", "--estimators", "vclub-s", "--batches", "32,512"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = csv_body(&dir.path().join("timing.csv"));
    assert_eq!(t[0], "estimator,batch_size,mean_seconds,reps");
    assert_eq!(column(&t, "batch_size"), ["32", "512"]);

    let o = mibounds(dir.path(), &["timing", "--batches", "64,32"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_dir_from_environment_and_config_file_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "seed=3\niters_per_level=60\nlevels=2\nout=from_config\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mibounds"))
        .args([
            "estimate",
            "--estimator",
            "vvub",
            "--config",
            "run.cfg",
            "--seed",
            "5",
        ])
        .current_dir(dir.path())
        .env("MIBOUNDS_OUT", "from_env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("from_env/quality.csv")).unwrap();
    assert!(text.contains("# seed=5"));
    assert!(text.contains("# iters_per_level=60"));
    assert!(!dir.path().join("from_config").exists());

    let o = mibounds(
        dir.path(),
        &[
            "estimate",
            "--estimator",
            "vvub",
            "--config",
            "run.cfg",
            "--out",
            "from_flag",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("from_flag/quality.csv").exists());
}
