use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradcal::stream::{generate_gaussian_cil, load_stream_csv, CsvSchema};
use gradcal::{StreamConfig, StreamMode};
use serde_json::Value;

const SMALL: &str = "seeds = [0, 1]\n\
methods = [\"ER\", \"DGC\"]\n\
stream.samples_per_class = 45\n\
stream.dim = 6\n\
train.steps_per_stage = 15\n\
train.batch_size = 8\n\
train.buffer_capacity = 40\n";

fn gradcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradcal"))
        .args(args)
        .env_remove("GRADCAL_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_clock(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir, SMALL);
    let out = dir.join(out);
    let mut args = vec![
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    gradcal(&args)
}

#[test]
fn two_seeds_two_methods_give_four_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), "r.jsonl", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = records(&dir.path().join("r.jsonl"));
    assert_eq!(recs.len(), 4);
    let cells: BTreeSet<(u64, String)> = recs
        .iter()
        .map(|r| {
            (
                r["seed"].as_u64().unwrap(),
                r["method"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    assert_eq!(cells.len(), 4);
    for r in &recs {
        assert_eq!(r["status"], "ok");
        assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(r["aa_series"].as_array().unwrap().len(), 5);
        for key in [
            "faia",
            "faa",
            "ff",
            "footprint",
            "smoothness",
            "wall_clock_seconds",
        ] {
            assert!(!r[key].is_null(), "missing {key}");
        }
    }
    assert_eq!(recs[0]["footprint"]["calibrator_bytes"], 0);
    assert!(recs[1]["footprint"]["calibrator_bytes"].as_u64().unwrap() > 0);
    let series = fs::read_to_string(dir.path().join("r.series.csv")).unwrap();
    assert!(series.starts_with("config_hash,axis_value,seed,method,series,x,y\n"));
    assert!(series.lines().any(|l| l.contains(",aa,")));
}

#[test]
fn reruns_are_identical_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_small(dir.path(), "a.jsonl", &["--threads", "1"])
        .status
        .success());
    let cfg = write_config(dir.path(), SMALL);
    let b = dir.path().join("b.jsonl");
    let o = Command::new(env!("CARGO_BIN_EXE_gradcal"))
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            b.to_str().unwrap(),
        ])
        .env("GRADCAL_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    let a: Vec<Value> = records(&dir.path().join("a.jsonl"))
        .into_iter()
        .map(without_clock)
        .collect();
    let b: Vec<Value> = records(&b).into_iter().map(without_clock).collect();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a.series.csv")).unwrap(),
        fs::read(dir.path().join("b.series.csv")).unwrap()
    );
}

#[test]
fn records_append_to_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_small(dir.path(), "r.jsonl", &["--seeds", "5"])
        .status
        .success());
    assert!(run_small(dir.path(), "r.jsonl", &["--seeds", "6,7"])
        .status
        .success());
    let seeds: Vec<u64> = records(&dir.path().join("r.jsonl"))
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![5, 5, 6, 6, 7, 7]);
}

#[test]
fn invalid_method_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "methods = [\"DGC\", \"SAGA\"]\n");
    let o = gradcal(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for name in ["SAGA", "ER", "SVRG-joint", "SSVRG", "DGC", "DGC-combined"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = [0,\ntrain.alpha = 2\n");
    let o = gradcal(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "train.alpha = 2.0\n");
    assert_eq!(
        gradcal(&["run", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gradcal(&["run", "--config", "/nonexistent/x.toml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(gradcal(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn failing_run_is_recorded_and_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}mode = \"tfcl\"\nmicro_task_size = 100000\n"),
    );
    let out = dir.path().join("r.jsonl");
    let o = gradcal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let recs = records(&out);
    assert_eq!(recs.len(), 4);
    assert!(recs
        .iter()
        .all(|r| r["status"] == "failed" && r["error"].is_string()));
}

#[test]
fn tfcl_mode_emits_series_at_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}mode = \"tfcl\"\nmicro_task_size = 10\neval_interval = 5\n"),
    );
    let out = dir.path().join("r.jsonl");
    let o = gradcal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 5 tasks x 2 classes x 30 training samples in micro-tasks of 10
    let xs: Vec<u64> = records(&out)[0]["aa_series"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p[0].as_u64().unwrap())
        .collect();
    assert_eq!(xs, (1..=6).map(|k| 5 * k).collect::<Vec<u64>>());
}

#[test]
fn empty_sweep_values_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = gradcal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "alpha",
        "--values",
        "",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = gradcal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "alpha",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = gradcal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "lr",
        "--values",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

fn sweep(dir: &Path, axis: &str, values: &str) -> (Output, Vec<Value>) {
    let cfg = write_config(dir, SMALL);
    let out = dir.join(format!("{axis}.jsonl"));
    let o = gradcal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        axis,
        "--values",
        values,
        "--seeds",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = records(&out);
    (o, recs)
}

#[test]
fn alpha_sweep_has_four_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (o, recs) = sweep(dir.path(), "alpha", "1e-2,1e-3,1e-4,0");
    assert_eq!(recs.len(), 4 * 2);
    let values: Vec<f64> = recs
        .iter()
        .map(|r| r["axis_value"].as_f64().unwrap())
        .collect();
    assert_eq!(values, vec![1e-2, 1e-2, 1e-3, 1e-3, 1e-4, 1e-4, 0.0, 0.0]);
    assert!(recs.iter().all(|r| r["axis"] == "alpha"));
    let hashes: BTreeSet<&str> = recs
        .iter()
        .map(|r| r["config_hash"].as_str().unwrap())
        .collect();
    assert_eq!(hashes.len(), 4);
    let text = stdout(&o);
    let header = text.lines().nth(1).unwrap();
    assert_eq!(
        header.split_whitespace().collect::<Vec<_>>(),
        ["method", "0.01", "0.001", "0.0001", "0"]
    );
    let dgc = text.lines().find(|l| l.starts_with("DGC ")).unwrap();
    assert_eq!(dgc.matches('±').count(), 4);
}

#[test]
fn m_sweep_covers_the_step_axis() {
    let dir = tempfile::tempdir().unwrap();
    let (_, recs) = sweep(dir.path(), "m", "1,100,200,300,400");
    let values: BTreeSet<u64> = recs
        .iter()
        .map(|r| r["axis_value"].as_f64().unwrap() as u64)
        .collect();
    assert_eq!(values, BTreeSet::from([1, 100, 200, 300, 400]));
    assert_eq!(recs.len(), 10);
    let (_, recs) = sweep(dir.path(), "buffer_capacity", "10,40");
    assert!(
        recs[0]["footprint"]["buffer_bytes"].as_u64()
            < recs[2]["footprint"]["buffer_bytes"].as_u64()
    );
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn aggregates_are_recomputable_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), "r.jsonl", &["--seeds", "0,1,2"]);
    assert!(o.status.success());
    let recs = records(&dir.path().join("r.jsonl"));
    let summary = fs::read_to_string(dir.path().join("r.summary.csv")).unwrap();
    let text = stdout(&o);
    for method in ["ER", "DGC"] {
        for (col, metric) in ["faia", "faa", "ff"].iter().enumerate() {
            let v: Vec<f64> = recs
                .iter()
                .filter(|r| r["method"] == method)
                .map(|r| r[*metric].as_f64().unwrap())
                .collect();
            let (mean, se) = mean_stderr(&v);
            let row: Vec<&str> = summary
                .lines()
                .find(|l| l.starts_with(&format!(",{method},{metric},")))
                .unwrap()
                .split(',')
                .collect();
            assert_eq!(row[3], "3");
            assert!((row[4].parse::<f64>().unwrap() - mean).abs() < 1e-12);
            assert!((row[5].parse::<f64>().unwrap() - se).abs() < 1e-12);
            let line = text
                .lines()
                .find(|l| l.starts_with(&format!("{method} ")))
                .unwrap();
            let cells: Vec<&str> = line.split_whitespace().collect();
            let printed = format!("{:.2}", 100.0 * mean);
            let printed_se = format!("{:.2}", 100.0 * se);
            assert_eq!(cells[1 + 3 * col], printed, "{line}");
            assert_eq!(cells[3 + 3 * col], printed_se, "{line}");
        }
    }
}

#[test]
fn gen_data_round_trips_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "stream.dim = 4\nstream.samples_per_class = 30\nstream.seed = 11\n",
    );
    let out = dir.path().join("stream.csv");
    let o = gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let test = dir.path().join("stream.test.csv");
    let loaded = load_stream_csv(
        &out,
        &CsvSchema {
            dim: 4,
            mode: StreamMode::Cil,
            test_path: Some(test.clone()),
            chunk_size: 0,
            class_count: Some(10),
        },
    )
    .unwrap();
    let expected = generate_gaussian_cil(&StreamConfig {
        dim: 4,
        samples_per_class: 30,
        seed: 11,
        ..StreamConfig::default()
    })
    .unwrap();
    assert_eq!(loaded, expected);

    let again = dir.path().join("again.csv");
    gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    let cfg = write_config(
        dir.path(),
        "stream.dim = 4\nstream.samples_per_class = 30\n",
    );
    let other = dir.path().join("other.csv");
    gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
        "--seeds",
        "12",
    ]);
    assert_ne!(fs::read(&out).unwrap(), fs::read(&other).unwrap());

    let cfg = write_config(
        dir.path(),
        "stream.classes_per_task = 3\nstream.tasks = 5\nstream.class_count = 10\n",
    );
    let o = gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = write_config(dir.path(), "stream.dim = 4\n");
    let o = gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "/nonexistent/dir/x.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runs_read_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "stream.dim = 6\nstream.samples_per_class = 45\nstream.seed = 3\n",
    );
    let data = dir.path().join("d.csv");
    assert!(gradcal(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let generated = format!("{SMALL}stream.seed = 3\n");
    let from_file =
        format!("{SMALL}stream.generator = \"file\"\nstream.path = \"d.csv\"\nstream.test_path = \"d.test.csv\"\n");
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for (body, out) in [(&generated, &a), (&from_file, &b)] {
        let cfg = write_config(dir.path(), body);
        let o = gradcal(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let metrics = |path: &Path| -> Vec<Value> {
        records(path)
            .into_iter()
            .map(|r| r["aa_series"].clone())
            .collect()
    };
    assert_eq!(metrics(&a), metrics(&b));
}

#[test]
fn verify_reports_every_property() {
    let o = gradcal(&["verify", "--profile", "quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert_eq!(lines.len(), 10, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("PASS")));
    assert_eq!(
        gradcal(&["verify", "--profile", "slow"]).status.code(),
        Some(1)
    );
}
