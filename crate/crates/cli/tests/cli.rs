use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metrolink_core::{PerNode, RunConfig};
use serde_json::Value;
use tempfile::TempDir;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn preset(name: &str) -> PathBuf {
    configs_dir().join(format!("{name}.toml"))
}

fn metrolink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metrolink")).args(args).output().expect("binary runs")
}

/// Runs with `--config` and `--out` set; panics unless it exits 0.
fn run_ok(config: &Path, out: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    let o = metrolink(&all);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn load(path: &Path) -> RunConfig {
    toml::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, config: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, toml::to_string(config).unwrap()).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn canonical_configs_match_presets() {
    for (name, flag, expected) in [
        ("delayed_choice", "delayed-choice", RunConfig::delayed_choice()),
        ("heralded", "heralded", RunConfig::heralded()),
        ("improvements", "improvements", RunConfig::improvements()),
    ] {
        let path = preset(name);
        assert_eq!(load(&path), expected, "{name}");
        let init = metrolink(&["init", "--preset", flag]);
        assert!(init.status.success());
        assert_eq!(String::from_utf8(init.stdout).unwrap(), fs::read_to_string(&path).unwrap(), "{name}");
        let shown = metrolink(&["--config", path.to_str().unwrap(), "show-config"]);
        assert_eq!(String::from_utf8(shown.stdout).unwrap(), fs::read_to_string(&path).unwrap(), "{name}");
    }
}

#[test]
fn malformed_config_exits_two_with_location() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(preset("heralded")).unwrap().replacen("seed = ", "sed = ", 1);
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = metrolink(&["--config", path.to_str().unwrap(), "show-config"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line") && err.contains("sed"), "{err}");

    let mut invalid = RunConfig::heralded();
    invalid.physics.alpha.delft = 2.0;
    let path = write_config(dir.path(), "invalid.toml", &invalid);
    assert_eq!(metrolink(&["--config", path.to_str().unwrap(), "show-config"]).status.code(), Some(2));

    assert_eq!(metrolink(&["show-config"]).status.code(), Some(2));
    assert_eq!(metrolink(&["--config", "/nonexistent/x.toml", "show-config"]).status.code(), Some(2));
}

#[test]
fn zero_duration_gives_empty_log() {
    let dir = TempDir::new().unwrap();
    let mut c = RunConfig::heralded();
    c.run.duration_s = 0.0;
    let path = write_config(dir.path(), "zero.toml", &c);
    let out = dir.path().join("out");
    run_ok(&path, &out, &["simulate"]);
    assert_eq!(fs::read_to_string(out.join("events.ndjson")).unwrap(), "");
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["successes"], 0);
    assert!(summary["fidelity"].is_null());
}

#[test]
fn heralded_simulation_matches_model() {
    let dir = TempDir::new().unwrap();
    run_ok(&preset("heralded"), dir.path(), &["simulate"]);
    let s = json(&dir.path().join("summary.json"));
    let model = metrolink_core::singleclick::simulate(&RunConfig::heralded().physics).unwrap().mean_fidelity();
    let state = s["state_fidelity"].as_f64().unwrap();
    assert!((state - model).abs() < 0.01, "{state} vs {model}");
    let rate = s["rate_hz"].as_f64().unwrap();
    assert!((rate / 0.022 - 1.0).abs() <= 0.15, "{rate}");
    assert_eq!(s["protocol_faults"], 0);
    let events = fs::read_to_string(dir.path().join("events.ndjson")).unwrap();
    assert!(events.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn outputs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = preset("delayed_choice");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run_ok(&cfg, &a, &["simulate"]);
    run_ok(&cfg, &b, &["simulate"]);
    run_ok(&cfg, &c, &["--seed", "99", "simulate"]);
    for f in ["summary.json", "events.ndjson"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("events.ndjson")).unwrap(), fs::read(c.join("events.ndjson")).unwrap());
}

#[test]
fn window_sweep_rate_and_trend() {
    let dir = TempDir::new().unwrap();
    let cfg = preset("delayed_choice");
    run_ok(&cfg, dir.path(), &["sweep-window", "--mode", "post-selected"]);
    let rows = csv_rows(&dir.path().join("sweep_window.csv"));
    assert_eq!(rows.len(), RunConfig::delayed_choice().sweep.windows_ns.len());
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    for w in rows.windows(2) {
        assert!(num(&w[1], 1) <= num(&w[0], 1) + 1e-12, "fidelity rises");
        assert!(num(&w[1], 3) > num(&w[0], 3), "rate falls");
    }
    let at20 = rows.iter().find(|r| num(r, 0) == 20.0).expect("20 ns row");
    assert!((num(at20, 3) / 0.48 - 1.0).abs() <= 0.15, "{}", num(at20, 3));

    run_ok(&cfg, dir.path(), &["sweep-window", "--windows", ""]);
    assert_eq!(
        fs::read_to_string(dir.path().join("sweep_window.csv")).unwrap(),
        "window_ns,fidelity,fidelity_err,rate_hz,snr\n"
    );
    let bad = metrolink(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "sweep-window",
        "--windows",
        "5,-1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn error_budget_scenarios() {
    let dir = TempDir::new().unwrap();
    let cfg = preset("improvements");
    for (scenario, file, target) in [("near-term", "near_term", 0.828), ("future", "future", 0.90)] {
        run_ok(&cfg, dir.path(), &["error-budget", "--scenario", scenario]);
        let rows = csv_rows(&dir.path().join(format!("error_budget_{file}.csv")));
        let fid: f64 = rows.iter().find(|r| r[0] == "fidelity_detector_1").unwrap()[2].parse().unwrap();
        assert!((fid - target).abs() <= 0.02, "{scenario}: {fid}");
    }
    run_ok(&cfg, dir.path(), &["error-budget"]);
    let rows = csv_rows(&dir.path().join("error_budget_measured.csv"));
    assert_eq!(rows.len(), 9);
    let total: f64 = rows.iter().find(|r| r[0] == "total").unwrap()[2].parse().unwrap();
    let fid: f64 = rows.iter().find(|r| r[0] == "fidelity_detector_1").unwrap()[2].parse().unwrap();
    assert!((total + fid - 1.0).abs() < 0.05, "total {total} fidelity {fid}");
}

fn support(path: &Path) -> (f64, f64) {
    let rows = csv_rows(path);
    let occupied: Vec<f64> =
        rows.iter().filter(|r| r[1].parse::<f64>().unwrap() > 0.0).map(|r| r[0].parse().unwrap()).collect();
    let mass: f64 = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-9, "{}: mass {mass}", path.display());
    (occupied.iter().cloned().fold(f64::INFINITY, f64::min), occupied.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[test]
fn drift_channels() {
    let dir = TempDir::new().unwrap();
    let cfg = preset("heralded");
    run_ok(&cfg, dir.path(), &["drift", "--channel", "timing"]);
    let s = json(&dir.path().join("drift_timing_summary.json"));
    assert!(s["fraction_within_bound"].as_f64().unwrap() >= 0.99);
    let (lo, hi) = support(&dir.path().join("drift_timing_stabilized.csv"));
    // Bin centers of an occupied bin sit at most half a bin past the data.
    assert!(lo >= -52.0 && hi <= 52.0, "{lo}..{hi}");

    run_ok(&cfg, dir.path(), &["drift", "--channel", "phase"]);
    let s = json(&dir.path().join("drift_phase_summary.json"));
    let std = s["stabilized_std"].as_f64().unwrap();
    assert!((std - 45.3).abs() <= 5.0, "{std}");

    run_ok(&cfg, dir.path(), &["drift", "--channel", "frequency"]);
    let s = json(&dir.path().join("drift_frequency_summary.json"));
    assert_eq!(s["saturation_events"], 0);
    assert!(s["free_peak_to_peak"].as_f64().unwrap() > 50.0);

    run_ok(&cfg, dir.path(), &["drift", "--channel", "polarization"]);
    let s = json(&dir.path().join("drift_polarization_summary.json"));
    assert!(s["fraction_within_bound"].as_f64().unwrap() >= 0.95);
    for f in ["free", "stabilized", "speed"] {
        assert!(dir.path().join(format!("drift_polarization_{f}.csv")).exists());
    }
}

#[test]
fn noiseless_drift_gives_delta_histograms() {
    let dir = TempDir::new().unwrap();
    let mut c = RunConfig::heralded();
    c.drift.timing.step_std_per_sqrt_s = 0.0;
    c.drift.timing.duration_s = 3_600.0;
    let path = write_config(dir.path(), "quiet.toml", &c);
    run_ok(&path, dir.path(), &["drift", "--channel", "timing"]);
    for f in ["free", "stabilized"] {
        let rows = csv_rows(&dir.path().join(format!("drift_timing_{f}.csv")));
        let occupied: Vec<_> = rows.iter().filter(|r| r[1].parse::<f64>().unwrap() > 0.0).collect();
        assert_eq!(occupied.len(), 1, "{f}");
        assert_eq!(occupied[0][1].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn calibration_completes_and_feeds_simulation() {
    let dir = TempDir::new().unwrap();
    let cfg = preset("heralded");
    run_ok(&cfg, dir.path(), &["calibrate"]);
    let report_path = dir.path().join("calibration.json");
    let report = json(&report_path);
    assert_eq!(report["completed"], true);
    assert_eq!(report["restarts"], 0);
    assert!(report["phase"]["state_phase_deg"].as_f64().is_some());

    let direct = dir.path().join("direct");
    let fed = dir.path().join("fed");
    run_ok(&cfg, &direct, &["simulate"]);
    run_ok(&cfg, &fed, &["simulate", "--calibration", report_path.to_str().unwrap()]);
    let a = json(&direct.join("summary.json"))["state_fidelity"].as_f64().unwrap();
    let b = json(&fed.join("summary.json"))["state_fidelity"].as_f64().unwrap();
    // A fitted phase a few degrees off costs well under a percent.
    assert!(b <= a + 1e-12 && a - b < 0.01, "{a} vs {b}");
}

#[test]
fn unreachable_gate_exhausts_cycles() {
    let dir = TempDir::new().unwrap();
    let mut c = RunConfig::heralded();
    let mut t = c.thresholds().unwrap();
    t.min_counts_per_shot = PerNode::both(0.9);
    c.calibration.thresholds = Some(t);
    c.calibration.settings.max_cycles = 4;
    let path = write_config(dir.path(), "strict.toml", &c);
    run_ok(&path, dir.path(), &["calibrate"]);
    let report = json(&dir.path().join("calibration.json"));
    assert_eq!(report["completed"], false);
    assert_eq!(report["cycles"], 4);
    assert!(report["restarts"].as_u64().unwrap() >= 3);
}

#[test]
fn report_without_phase_is_rejected() {
    let dir = TempDir::new().unwrap();
    let bogus = dir.path().join("report.json");
    fs::write(&bogus, "{}").unwrap();
    let o = metrolink(&[
        "--config",
        preset("heralded").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "simulate",
        "--calibration",
        bogus.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
