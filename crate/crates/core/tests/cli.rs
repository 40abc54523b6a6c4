use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cptd::conformal::read_intervals;
use cptd::numfmt::parse_num;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn cptd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cptd")).args(args).arg("--output").arg(out).output().unwrap()
}

fn calibrate_fixture(out: &Path, extra: &[&str]) -> Output {
    let panel = fixture("tiny_panel.csv");
    let preds = fixture("tiny_predictions.csv");
    let mut args = vec![
        "calibrate",
        "--panel",
        panel.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--n-train",
        "2",
        "--n-cal",
        "3",
        "--n-test",
        "3",
        "--split-mode",
        "temporal",
    ];
    args.extend_from_slice(extra);
    cptd(&args, out)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn calibrate_matches_golden_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_fixture(dir.path(), &["--method", "split", "--alpha", "0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let written = fs::read(dir.path().join("intervals.csv")).unwrap();
    assert_eq!(written, fs::read(fixture("tiny_split_alpha05.csv")).unwrap());
}

#[test]
fn interval_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_fixture(dir.path(), &["--alpha", "0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sets = read_intervals(fs::File::open(dir.path().join("intervals.csv")).unwrap()).unwrap();
    let methods: Vec<&str> = sets.iter().map(|s| s.method.as_str()).collect();
    assert_eq!(methods, ["split", "cptd_mad", "cptd_rat", "lasplit"]);
    assert!(sets.iter().all(|s| s.n_series() == 3 && s.horizon() == 3));
}

#[test]
fn manifest_checksums_match_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(calibrate_fixture(dir.path(), &["--method", "split"]).status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 1);
    for a in artifacts {
        let bytes = fs::read(dir.path().join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert_eq!(manifest["config"]["calibration"]["alpha"], 0.1);
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn invalid_alpha_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_fixture(dir.path(), &["--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("ConfigError:"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_panel_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cptd(&["calibrate", "--panel", "/nonexistent/panel.csv", "--n-train", "1", "--n-cal", "1"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("IoError:"));
}

#[test]
fn malformed_panel_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("bad.csv");
    fs::write(&panel, "series_id,t,y\na,0,1\na,1,NaN\nb,0,1\nb,1,2\nc,0,1\nc,1,1\n").unwrap();
    let out = cptd(&["calibrate", "--panel", panel.to_str().unwrap(), "--n-train", "1", "--n-cal", "1"], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).starts_with("DataError:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "alpah = 0.2\n").unwrap();
    let out = cptd(&["simulate", "--config", config.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "alpha = 0.2\nmethod = [\"split\", \"cptd_rat\"]\n").unwrap();
    let panel = fixture("tiny_panel.csv");
    let out = cptd(
        &[
            "calibrate",
            "--config",
            config.to_str().unwrap(),
            "--panel",
            panel.to_str().unwrap(),
            "--n-train",
            "4",
            "--n-cal",
            "2",
            "--alpha",
            "0.4",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let sets = read_intervals(fs::File::open(dir.path().join("intervals.csv")).unwrap()).unwrap();
    assert_eq!(sets.len(), 2);
    assert!(sets.iter().all(|s| s.alpha == 0.4 && s.n_series() == 2));
}

fn summary_value(path: &Path, method: &str, metric: &str) -> f64 {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    for r in rdr.records() {
        let r = r.unwrap();
        if &r[0] == method && &r[1] == metric {
            return parse_num(&r[2]).unwrap();
        }
    }
    panic!("no {method}/{metric} row");
}

#[test]
fn default_simulation_covers_at_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = cptd(&["simulate", "--method", "split"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let cov = summary_value(&dir.path().join("summary.csv"), "split", "mean_coverage");
    assert!((0.895..=0.915).contains(&cov), "{cov}");
    for f in ["summary.csv", "summary.txt", "replicates.csv", "coverage_by_step.csv", "curves.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = cptd(
        &["evaluate", "--synthetic", "--replicates", "3", "--horizon", "6", "--eval-window", "full", "--n-cal", "19", "--n-test", "30"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let cov = summary_value(&dir.path().join("summary.csv"), "cptd_rat", "mean_coverage");
    assert!(cov > 0.7 && cov <= 1.0);
    let rows = csv::Reader::from_path(dir.path().join("replicates.csv")).unwrap().records().count();
    assert!(rows >= 3 * 4 * 3);
    let text = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(text.contains("mean_coverage") && text.contains('±'));
}

#[test]
fn evaluate_is_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let panel = fixture("tiny_panel.csv");
        let out = cptd(
            &["evaluate", "--panel", panel.to_str().unwrap(), "--n-train", "3", "--n-cal", "3", "--replicates", "4", "--eval-window", "full"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
        ["summary.csv", "replicates.csv", "manifest.json"].map(|f| fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(run(), run());
}
