use std::fs;
use std::path::{Path, PathBuf};

use metrolink_core::calibration::{run_calibration_cycle, state_phase_deg, wrap_degrees, CalibrationReport};
use metrolink_core::drift::{
    fast_actuator_trace, run_desaturation, run_phase_lock_chain, run_polarization_feedback, run_sampled_correction,
    sampled_correction_expected_std, simulate_drift, simulate_phase_chain, simulate_polarization_drift, Histogram,
};
use metrolink_core::link_sim::{check_log, parse_ndjson, run_link_with_phase_error, summarize, to_ndjson};
use metrolink_core::quantum::STATE_TOLERANCE;
use metrolink_core::singleclick::{error_budget as budget, simulate as model, window_sweep, SweepSettings};
use metrolink_core::{Mode, RunConfig, Scenario, SeedTree};
use serde::Serialize;

use crate::error::CliError;
use crate::Channel;

const HISTOGRAM_BINS: usize = 81;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> Result<String, CliError> {
    toml::to_string_pretty(config).map_err(config_err)
}

/// Comma-separated window list; an empty string is an empty list.
pub fn parse_windows(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<f64>() {
            Ok(w) if w > 0.0 && w.is_finite() => Ok(w),
            _ => Err(CliError::Config(format!("--windows: `{t}` is not a positive window length"))),
        })
        .collect()
}

struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(config: &RunConfig) -> Result<Self, CliError> {
        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir)
            .map_err(|source| CliError::Io { context: format!("creating {}", dir.display()), source })?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|source| CliError::Io { context: format!("writing {}", path.display()), source })?;
        self.written.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invariant(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// Residual between the true state phase and the one a calibration report fitted.
fn phase_error_from_report(config: &RunConfig, path: &Path) -> Result<f64, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report: CalibrationReport =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let fitted = report
        .phase
        .and_then(|p| p.state_phase_deg)
        .ok_or_else(|| CliError::Config(format!("{}: report has no fitted state phase", path.display())))?;
    let s = &config.calibration.settings;
    Ok(wrap_degrees(state_phase_deg(s.setpoint_deg, s.xsweep.state_phase_offset_deg) - fitted))
}

pub fn simulate(config: &RunConfig, mode: Option<Mode>, calibration: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let mode = mode.unwrap_or(config.run.mode);
    let phase_error = calibration.map(|p| phase_error_from_report(config, p)).transpose()?.unwrap_or(0.0);
    let setup = config.setup();
    let seeds = SeedTree::new(config.seed).child("simulate");
    let run = run_link_with_phase_error(&setup, mode, config.run.duration_s, seeds, phase_error).map_err(config_err)?;

    check_log(&run.log, &setup, mode).map_err(|v| CliError::Invariant(v.to_string()))?;
    for s in run.states.iter().flatten() {
        s.validate(STATE_TOLERANCE).map_err(|e| CliError::Invariant(format!("delivered state: {e}")))?;
    }
    let ndjson = to_ndjson(&run.log);
    let reparsed =
        parse_ndjson(&ndjson).map_err(|e| CliError::Invariant(format!("event log does not parse back: {e}")))?;
    if summarize(&reparsed, &run.context) != run.summary {
        return Err(CliError::Invariant("summary differs from the event-log recomputation".to_string()));
    }

    let mut out = Output::new(config)?;
    out.write_json("summary.json", &run.summary)?;
    out.write("events.ndjson", &ndjson)?;
    Ok(out.written)
}

pub fn sweep_window(
    config: &RunConfig,
    windows: Option<Vec<f64>>,
    mode: Option<Mode>,
) -> Result<Vec<PathBuf>, CliError> {
    let windows = windows.unwrap_or_else(|| config.sweep.windows_ns.clone());
    let mode = mode.unwrap_or(config.run.mode);
    let setup = config.setup();
    let p = model(&config.physics).map_err(config_err)?.success_probability;
    let attempt_rate_hz = setup.effective_attempt_rate_hz(mode, p).map_err(config_err)?;
    let settings = SweepSettings { attempt_rate_hz, measurement_time_s: config.sweep.measurement_time_s };
    let sweep = window_sweep(&config.physics, &windows, settings).map_err(config_err)?;
    let mut out = Output::new(config)?;
    out.write("sweep_window.csv", &sweep.to_csv())?;
    Ok(out.written)
}

pub fn error_budget(config: &RunConfig, scenario: Scenario) -> Result<Vec<PathBuf>, CliError> {
    let b = budget(&config.scenario(scenario)).map_err(config_err)?;
    let mut out = Output::new(config)?;
    out.write(&format!("error_budget_{}.csv", scenario.name().replace('-', "_")), &b.to_csv())?;
    Ok(out.written)
}

#[derive(Debug, Serialize)]
struct DriftSummary {
    channel: &'static str,
    samples: usize,
    free_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    free_peak_to_peak: Option<f64>,
    stabilized_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_stabilized_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fraction_within_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    saturation_events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slow_corrections: Option<usize>,
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn peak_to_peak(xs: &[f64]) -> f64 {
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if xs.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

fn lag(interval_s: f64, dt_s: f64) -> usize {
    ((interval_s / dt_s).round() as usize).max(1)
}

fn increments(xs: &[f64], lag: usize) -> Vec<f64> {
    if xs.len() <= lag {
        return Vec::new();
    }
    xs.windows(lag + 1).step_by(lag).map(|w| w[lag] - w[0]).collect()
}

pub fn drift(config: &RunConfig, channel: Channel) -> Result<Vec<PathBuf>, CliError> {
    let seeds = SeedTree::new(config.seed).child("drift").child(channel.name());
    let d = &config.drift;
    let (free, stabilized, speed, summary) = match channel {
        Channel::Timing => {
            let c = &d.timing;
            let trace = simulate_drift(&d.timing_process(seeds.root()), c.duration_s, c.dt_s).map_err(config_err)?;
            let stats = run_sampled_correction(&trace, c.correction_interval_s, c.bound_ps).map_err(config_err)?;
            let summary = DriftSummary {
                channel: channel.name(),
                samples: trace.values.len(),
                free_std: std_dev(&trace.values),
                free_peak_to_peak: Some(trace.peak_to_peak()),
                stabilized_std: stats.std,
                expected_stabilized_std: Some(sampled_correction_expected_std(
                    c.step_std_per_sqrt_s,
                    c.correction_interval_s,
                )),
                bound: Some(c.bound_ps),
                fraction_within_bound: Some(stats.fraction_within_bound),
                saturation_events: None,
                slow_corrections: None,
            };
            let speed = trace.increments(lag(c.speed_interval_s, c.dt_s));
            (Histogram::auto(&trace.values, HISTOGRAM_BINS), stats.histogram, speed, summary)
        }
        Channel::Phase => {
            let c = &d.phase;
            let mut open = c.chain.clone();
            for l in &mut open.loops {
                l.enabled = false;
            }
            let free = simulate_phase_chain(&open, c.duration_s, c.dt_s, &seeds.child("free")).map_err(config_err)?;
            let locked =
                simulate_phase_chain(&c.chain, c.duration_s, c.dt_s, &seeds.child("locked")).map_err(config_err)?;
            let analytic = run_phase_lock_chain(&c.chain).map_err(config_err)?;
            let speed = increments(&free, lag(c.speed_interval_s, c.dt_s));
            let wrapped: Vec<f64> = free.iter().map(|&x| wrap_degrees(x)).collect();
            let summary = DriftSummary {
                channel: channel.name(),
                samples: locked.len(),
                free_std: std_dev(&wrapped),
                free_peak_to_peak: Some(peak_to_peak(&free)),
                stabilized_std: std_dev(&locked),
                expected_stabilized_std: Some(analytic.total_std_deg),
                bound: None,
                fraction_within_bound: None,
                saturation_events: None,
                slow_corrections: None,
            };
            (Histogram::auto(&wrapped, HISTOGRAM_BINS), Histogram::auto(&locked, HISTOGRAM_BINS), speed, summary)
        }
        Channel::Frequency => {
            let c = &d.frequency;
            let trace = simulate_drift(&d.frequency_process(seeds.root()), c.duration_s, c.dt_s).map_err(config_err)?;
            let (fast, corrections) = fast_actuator_trace(c.slow_rate_hz, &trace).map_err(config_err)?;
            let report = run_desaturation(c.fast_range_mhz, c.slow_rate_hz, &trace).map_err(config_err)?;
            if report.slow_corrections != corrections {
                return Err(CliError::Invariant("desaturation report disagrees with the actuator trace".to_string()));
            }
            let within = fast.iter().filter(|f| f.abs() <= c.fast_range_mhz).count() as f64 / fast.len().max(1) as f64;
            let summary = DriftSummary {
                channel: channel.name(),
                samples: trace.values.len(),
                free_std: std_dev(&trace.values),
                free_peak_to_peak: Some(report.drift_peak_to_peak),
                stabilized_std: std_dev(&fast),
                expected_stabilized_std: None,
                bound: Some(c.fast_range_mhz),
                fraction_within_bound: Some(within),
                saturation_events: Some(report.saturation_events),
                slow_corrections: Some(report.slow_corrections),
            };
            let speed = trace.increments(lag(c.speed_interval_s, c.dt_s));
            (Histogram::auto(&trace.values, HISTOGRAM_BINS), Histogram::auto(&fast, HISTOGRAM_BINS), speed, summary)
        }
        Channel::Polarization => {
            let c = &d.polarization;
            let stokes = simulate_polarization_drift(&d.polarization_process(seeds.root()), c.duration_s, c.dt_s)
                .map_err(config_err)?;
            let free = run_polarization_feedback(&stokes, c.dt_s, None).map_err(config_err)?;
            let locked = run_polarization_feedback(&stokes, c.dt_s, c.controller).map_err(config_err)?;
            let k = lag(c.speed_interval_s, c.dt_s);
            // Angle swept on the Poincaré sphere per interval, in degrees.
            let speed: Vec<f64> = stokes
                .iter()
                .step_by(k)
                .zip(stokes.iter().skip(k).step_by(k))
                .map(|(a, b)| (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos().to_degrees())
                .collect();
            let summary = DriftSummary {
                channel: channel.name(),
                samples: stokes.len(),
                free_std: free.std,
                free_peak_to_peak: None,
                stabilized_std: locked.std,
                expected_stabilized_std: None,
                bound: Some(locked.bound),
                fraction_within_bound: Some(locked.fraction_within_bound),
                saturation_events: None,
                slow_corrections: None,
            };
            (free.histogram, locked.histogram, speed, summary)
        }
    };
    let speed = Histogram::auto(&speed, HISTOGRAM_BINS);
    for (name, h) in [("free", &free), ("stabilized", &stabilized), ("speed", &speed)] {
        if !h.probabilities.is_empty() && (h.mass() - 1.0).abs() > 1e-9 {
            return Err(CliError::Invariant(format!("{name} histogram mass {}", h.mass())));
        }
    }
    let stem = format!("drift_{}", channel.name());
    let mut out = Output::new(config)?;
    out.write(&format!("{stem}_free.csv"), &free.to_csv())?;
    out.write(&format!("{stem}_stabilized.csv"), &stabilized.to_csv())?;
    out.write(&format!("{stem}_speed.csv"), &speed.to_csv())?;
    out.write_json(&format!("{stem}_summary.json"), &summary)?;
    Ok(out.written)
}

pub fn calibrate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let thresholds = config.thresholds()?;
    let mut rng = SeedTree::new(config.seed).rng("calibration");
    let report = run_calibration_cycle(&thresholds, &config.physics, &config.calibration.settings, &mut rng)
        .map_err(config_err)?;
    let mut out = Output::new(config)?;
    out.write_json("calibration.json", &report)?;
    Ok(out.written)
}
