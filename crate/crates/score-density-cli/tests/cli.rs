//! End-to-end tests of the command-line binary: exit codes, the output
//! header contract, format parity, and reproducibility of runs.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_score-density"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_two_bump(dir: &Path) -> String {
    let path = dir.join("two_bump.json");
    let model = json!({
        "d": 1,
        "components": [
            {"w": 0.6, "mean": [-2.0], "var": 1.0},
            {"w": 0.4, "mean": [2.0], "var": 0.25},
        ],
    });
    std::fs::write(&path, model.to_string()).expect("model file written");
    path.display().to_string()
}

#[test]
fn density_example_matches_documented_value() {
    let out = run(&[
        "density", "--point", "0", "--T", "1000", "--seed", "7", "--samples", "4000",
    ]);
    let doc = stdout_json(&out);
    let total = doc["payload"]["total"].as_f64().unwrap();
    // ln N(0 | 0, 1) = −0.9189…; the default schedule keeps the
    // evaluation within its discretization bias of that.
    assert!(
        (total + 0.9189).abs() < 0.2,
        "total {total} far from -0.9189"
    );
}

#[test]
fn density_tracks_the_analytic_value_at_c0_one() {
    let out = run(&[
        "density", "--point", "0", "--T", "1000", "--c0", "1", "--seed", "7", "--samples", "4000",
    ]);
    let doc = stdout_json(&out);
    let total = doc["payload"]["total"].as_f64().unwrap();
    let analytic = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!(
        (total - analytic).abs() < 0.05,
        "total {total} vs analytic {analytic}"
    );
}

#[test]
fn header_reports_version_command_seed_and_config() {
    let out = run(&["density", "--T", "50", "--seed", "5", "--samples", "200"]);
    let doc = stdout_json(&out);
    assert_eq!(doc["version"].as_str(), Some(env!("CARGO_PKG_VERSION")));
    assert_eq!(doc["command"].as_str(), Some("density"));
    assert_eq!(doc["seed"].as_u64(), Some(5));
    let config = &doc["config"];
    assert_eq!(config["samples"].as_u64(), Some(200));
    assert_eq!(config["schedule"]["T"].as_u64(), Some(50));
    assert_eq!(config["point"], json!([0.0]));
    assert_eq!(config["antithetic"].as_bool(), Some(true));
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_two_bump(dir.path());
    let args = |out: &str| {
        vec![
            "density".to_string(),
            "--model".to_string(),
            model.clone(),
            "--point".to_string(),
            "0.5".to_string(),
            "--T".to_string(),
            "200".to_string(),
            "--c0".to_string(),
            "1".to_string(),
            "--samples".to_string(),
            "2000".to_string(),
            "--seed".to_string(),
            "11".to_string(),
            "--out".to_string(),
            dir.path().join(out).display().to_string(),
        ]
    };
    assert!(bin().args(args("a.json")).status().unwrap().success());
    assert!(bin().args(args("b.json")).status().unwrap().success());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "density reruns differ");

    let sample = |out: &str| {
        vec![
            "sample".to_string(),
            "--T".to_string(),
            "50".to_string(),
            "--samples".to_string(),
            "20".to_string(),
            "--seed".to_string(),
            "3".to_string(),
            "--out".to_string(),
            dir.path().join(out).display().to_string(),
        ]
    };
    assert!(bin().args(sample("c.json")).status().unwrap().success());
    assert!(bin().args(sample("d.json")).status().unwrap().success());
    let c = std::fs::read(dir.path().join("c.json")).unwrap();
    let d = std::fs::read(dir.path().join("d.json")).unwrap();
    assert_eq!(c, d, "sampler reruns differ");
}

#[test]
fn output_files_match_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("out.json");
    let to_stdout = run(&["schedule", "--T", "20"]);
    assert!(to_stdout.status.success());
    let to_file = run(&[
        "schedule",
        "--T",
        "20",
        "--out",
        &file.display().to_string(),
    ]);
    assert!(to_file.status.success());
    assert!(to_file.stdout.is_empty());
    assert_eq!(std::fs::read(&file).unwrap(), to_stdout.stdout);
}

#[test]
fn csv_output_leads_with_the_json_header() {
    let out = run(&["schedule", "--T", "5", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# {"), "first line: {first}");
    let header: Value = serde_json::from_str(&first[2..]).unwrap();
    assert_eq!(header["command"].as_str(), Some("schedule"));
    assert_eq!(header["config"]["schedule"]["T"].as_u64(), Some(5));
    assert!(
        text.lines().any(|l| l.starts_with("t_index,beta,")),
        "missing column header"
    );
    // 5 schedule rows follow the column header.
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn csv_and_json_totals_agree() {
    let args = [
        "density", "--T", "50", "--samples", "500", "--seed", "2", "--point", "0.7",
    ];
    let json_doc = stdout_json(&run(&args));
    let from_json = json_doc["payload"]["total"].as_f64().unwrap();
    let mut csv_args = args.to_vec();
    csv_args.extend(["--format", "csv"]);
    let csv_out = run(&csv_args);
    assert!(csv_out.status.success());
    let text = String::from_utf8(csv_out.stdout).unwrap();
    let total_line = text
        .lines()
        .find(|l| l.starts_with("# total="))
        .expect("csv carries the total");
    let from_csv: f64 = total_line["# total=".len()..].parse().unwrap();
    assert_eq!(from_json.to_bits(), from_csv.to_bits());
}

#[test]
fn schedule_files_reproduce_flag_built_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("schedule.json");
    let schedule = score_density::build_schedule(100, 1.0, 2.0).unwrap();
    std::fs::write(&path, serde_json::to_string(&schedule).unwrap()).unwrap();
    let from_file = stdout_json(&run(&[
        "density",
        "--schedule",
        &path.display().to_string(),
        "--samples",
        "400",
        "--seed",
        "6",
    ]));
    let from_flags = stdout_json(&run(&[
        "density", "--T", "100", "--c0", "1", "--c1", "2", "--samples", "400", "--seed", "6",
    ]));
    assert_eq!(from_file["payload"], from_flags["payload"]);
}

#[test]
fn classifier_posterior_is_normalized() {
    let out = run(&[
        "classify", "--point", "0.8", "--T", "100", "--samples", "500", "--seed", "1",
    ]);
    let doc = stdout_json(&out);
    let payload = &doc["payload"];
    for key in ["posterior", "bayes_posterior"] {
        let sum: f64 = payload[key]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-12, "{key} sums to {sum}");
    }
    let tv = payload["tv_distance"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tv));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["density", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "no synopsis in: {err}");

    let bare = run(&[]);
    assert_eq!(bare.status.code(), Some(2));
}

#[test]
fn dimension_mismatches_exit_two() {
    let out = run(&["density", "--point", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dimension"), "stderr: {err}");
}

#[test]
fn two_dimensional_models_are_rejected_for_gan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model2d.json");
    let model = json!({
        "d": 2,
        "components": [{"w": 1.0, "mean": [0.0, 0.0], "var": 1.0}],
    });
    std::fs::write(&path, model.to_string()).unwrap();
    let out = run(&["gan", "--model", &path.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("one-dimensional"));
}

#[test]
fn numeric_failures_exit_three() {
    let out = run(&["density", "--method", "ode", "--point", "1e300", "--T", "100"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn selftest_passes_quickly() {
    let started = std::time::Instant::now();
    let out = run(&["selftest"]);
    let elapsed = started.elapsed();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let summary = text
        .lines()
        .find(|l| l.starts_with("selftest:"))
        .expect("summary line");
    assert!(summary.contains("0 failed"), "summary: {summary}");
    assert!(
        text.lines().filter(|l| l.starts_with("pass  ")).count() >= 10,
        "too few checks ran"
    );
    assert!(elapsed.as_secs() < 10, "selftest took {elapsed:?}");
}
