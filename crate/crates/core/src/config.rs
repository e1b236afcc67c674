//! Run configuration shared by the command-line front end and the tests.
//!
//! The structs carry `deny_unknown_fields` throughout so a misspelled key is
//! a load error rather than a silently ignored default.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationSettings, CalibrationThresholds};
use crate::drift::{Diurnal, DriftError, DriftKind, DriftProcess, PhaseChain, PolarizationController};
use crate::link_sim::{CoherenceModel, LinkError, LinkSetup, LinkTopology, Mode, NodeSchedule};
use crate::singleclick::{LinkParameters, ModelError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

fn require_positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

/// Mode and length of a `simulate` run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub mode: Mode,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSweepConfig {
    pub windows_ns: Vec<f64>,
    /// Integration time behind the fidelity error bars.
    pub measurement_time_s: f64,
}

/// Random-walk channel with a sampled correction (fiber timing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingChannel {
    pub step_std_per_sqrt_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diurnal: Option<Diurnal>,
    pub duration_s: f64,
    pub dt_s: f64,
    pub correction_interval_s: f64,
    pub bound_ps: f64,
    /// Lag of the drift-speed increments.
    pub speed_interval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseChannel {
    pub chain: PhaseChain,
    pub duration_s: f64,
    pub dt_s: f64,
    pub speed_interval_s: f64,
}

/// Laser frequency walk under the two-stage fast/slow loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyChannel {
    pub step_std_per_sqrt_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diurnal: Option<Diurnal>,
    pub duration_s: f64,
    pub dt_s: f64,
    pub fast_range_mhz: f64,
    /// Slow desaturation loop rate; absent disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow_rate_hz: Option<f64>,
    pub speed_interval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarizationChannel {
    pub step_std_per_sqrt_s: f64,
    pub duration_s: f64,
    pub dt_s: f64,
    /// Absent leaves the paddles fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<PolarizationController>,
    pub speed_interval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub timing: TimingChannel,
    pub phase: PhaseChannel,
    pub frequency: FrequencyChannel,
    pub polarization: PolarizationChannel,
}

impl DriftConfig {
    pub fn timing_process(&self, seed: u64) -> DriftProcess {
        DriftProcess {
            kind: DriftKind::Timing,
            step_std_per_sqrt_s: self.timing.step_std_per_sqrt_s,
            diurnal: self.timing.diurnal,
            seed,
        }
    }

    pub fn frequency_process(&self, seed: u64) -> DriftProcess {
        DriftProcess {
            kind: DriftKind::Frequency,
            step_std_per_sqrt_s: self.frequency.step_std_per_sqrt_s,
            diurnal: self.frequency.diurnal,
            seed,
        }
    }

    pub fn polarization_process(&self, seed: u64) -> DriftProcess {
        DriftProcess {
            kind: DriftKind::Polarization,
            step_std_per_sqrt_s: self.polarization.step_std_per_sqrt_s,
            diurnal: None,
            seed,
        }
    }

    fn for_chain(chain: PhaseChain) -> Self {
        Self {
            timing: TimingChannel {
                step_std_per_sqrt_s: 5.0 / 60f64.sqrt(),
                diurnal: None,
                duration_s: 86_400.0,
                dt_s: 1.0,
                correction_interval_s: 900.0,
                bound_ps: 50.0,
                speed_interval_s: 60.0,
            },
            phase: PhaseChannel { chain, duration_s: 1.0, dt_s: 2e-7, speed_interval_s: 1e-3 },
            frequency: FrequencyChannel {
                step_std_per_sqrt_s: 0.2,
                diurnal: None,
                duration_s: 86_400.0,
                dt_s: 0.1,
                fast_range_mhz: 10.0,
                slow_rate_hz: Some(500.0),
                speed_interval_s: 60.0,
            },
            polarization: PolarizationChannel {
                step_std_per_sqrt_s: 0.1,
                duration_s: 3_600.0,
                dt_s: 0.01,
                controller: Some(PolarizationController::default()),
                speed_interval_s: 1.0,
            },
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.timing;
        for (name, v) in [
            ("drift.timing.duration_s", t.duration_s),
            ("drift.timing.dt_s", t.dt_s),
            ("drift.timing.correction_interval_s", t.correction_interval_s),
            ("drift.timing.bound_ps", t.bound_ps),
            ("drift.timing.speed_interval_s", t.speed_interval_s),
            ("drift.phase.duration_s", self.phase.duration_s),
            ("drift.phase.dt_s", self.phase.dt_s),
            ("drift.phase.speed_interval_s", self.phase.speed_interval_s),
            ("drift.frequency.duration_s", self.frequency.duration_s),
            ("drift.frequency.dt_s", self.frequency.dt_s),
            ("drift.frequency.fast_range_mhz", self.frequency.fast_range_mhz),
            ("drift.frequency.speed_interval_s", self.frequency.speed_interval_s),
            ("drift.polarization.duration_s", self.polarization.duration_s),
            ("drift.polarization.dt_s", self.polarization.dt_s),
            ("drift.polarization.speed_interval_s", self.polarization.speed_interval_s),
        ] {
            require_positive(name, v)?;
        }
        for (name, v) in [
            ("drift.timing.step_std_per_sqrt_s", t.step_std_per_sqrt_s),
            ("drift.frequency.step_std_per_sqrt_s", self.frequency.step_std_per_sqrt_s),
            ("drift.polarization.step_std_per_sqrt_s", self.polarization.step_std_per_sqrt_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(r) = self.frequency.slow_rate_hz {
            require_positive("drift.frequency.slow_rate_hz", r)?;
        }
        if let Some(c) = self.polarization.controller {
            require_positive("drift.polarization.controller.feedback_rate_hz", c.feedback_rate_hz)?;
            require_positive("drift.polarization.controller.dither", c.dither)?;
        }
        let chain = &self.phase.chain;
        if chain.loops.len() != 5 {
            return Err(invalid("drift.phase.chain.loops", format!("expected 5 loops, got {}", chain.loops.len())));
        }
        let mut names = BTreeSet::new();
        for l in &chain.loops {
            if !names.insert(l.name.as_str()) {
                return Err(invalid("drift.phase.chain.loops", format!("duplicate loop name `{}`", l.name)));
            }
            require_positive("drift.phase.chain.loops.bandwidth_hz", l.bandwidth_hz)?;
        }
        require_positive("drift.phase.chain.global_lowpass_hz", chain.global_lowpass_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub settings: CalibrationSettings,
    /// Explicit gates; absent means 80% of the nominal simulated values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<CalibrationThresholds>,
}

/// Parameter sets selectable by name in the error budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Measured,
    NearTerm,
    Future,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Measured, Scenario::NearTerm, Scenario::Future];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Measured => "measured",
            Scenario::NearTerm => "near-term",
            Scenario::Future => "future",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}` (expected measured, near-term or future)"))
    }
}

/// Overrides of the improvement scenarios; built-in sets are used otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScenarioSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_term: Option<LinkParameters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<LinkParameters>,
}

impl ScenarioSet {
    fn is_empty(&self) -> bool {
        self.near_term.is_none() && self.future.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub run: RunSettings,
    pub topology: LinkTopology,
    pub schedule: NodeSchedule,
    pub physics: LinkParameters,
    pub coherence: CoherenceModel,
    pub sweep: WindowSweepConfig,
    pub drift: DriftConfig,
    pub calibration: CalibrationConfig,
    #[serde(default, skip_serializing_if = "ScenarioSet::is_empty")]
    pub scenarios: ScenarioSet,
}

impl RunConfig {
    pub fn delayed_choice() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out/delayed_choice"),
            run: RunSettings { mode: Mode::PostSelected, duration_s: 600.0 },
            topology: LinkTopology::default(),
            schedule: NodeSchedule::default(),
            physics: LinkParameters::delayed_choice(),
            coherence: CoherenceModel::default(),
            sweep: WindowSweepConfig {
                windows_ns: vec![3.0, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0],
                measurement_time_s: 36_000.0,
            },
            drift: DriftConfig::for_chain(PhaseChain::delayed_choice()),
            calibration: CalibrationConfig { settings: CalibrationSettings::delayed_choice(), thresholds: None },
            scenarios: ScenarioSet::default(),
        }
    }

    pub fn heralded() -> Self {
        Self {
            output_dir: PathBuf::from("out/heralded"),
            run: RunSettings { mode: Mode::Heralded, duration_s: 20_000.0 },
            physics: LinkParameters::heralded(),
            sweep: WindowSweepConfig {
                windows_ns: vec![5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0],
                measurement_time_s: 120_000.0,
            },
            drift: DriftConfig::for_chain(PhaseChain::heralded()),
            calibration: CalibrationConfig { settings: CalibrationSettings::heralded(), thresholds: None },
            ..Self::delayed_choice()
        }
    }

    /// Heralded plant with the near-term and future parameter sets spelled out.
    pub fn improvements() -> Self {
        Self {
            output_dir: PathBuf::from("out/improvements"),
            scenarios: ScenarioSet {
                near_term: Some(LinkParameters::near_term()),
                future: Some(LinkParameters::future()),
            },
            ..Self::heralded()
        }
    }

    pub fn setup(&self) -> LinkSetup {
        LinkSetup {
            topology: self.topology.clone(),
            schedule: self.schedule.clone(),
            physics: self.physics.clone(),
            coherence: self.coherence.clone(),
        }
    }

    /// Physics of a named scenario.
    pub fn scenario(&self, s: Scenario) -> LinkParameters {
        match s {
            Scenario::Measured => self.physics.clone(),
            Scenario::NearTerm => self.scenarios.near_term.clone().unwrap_or_else(LinkParameters::near_term),
            Scenario::Future => self.scenarios.future.clone().unwrap_or_else(LinkParameters::future),
        }
    }

    /// Gates from the config, or the nominal ones.
    pub fn thresholds(&self) -> Result<CalibrationThresholds, ConfigError> {
        match self.calibration.thresholds {
            Some(t) => Ok(t),
            None => Ok(CalibrationThresholds::nominal(&self.physics, &self.calibration.settings)?),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.setup().validate()?;
        for s in [Scenario::NearTerm, Scenario::Future] {
            self.scenario(s).validate()?;
        }
        if !(self.run.duration_s >= 0.0 && self.run.duration_s.is_finite()) {
            return Err(invalid("run.duration_s", format!("must be non-negative, got {}", self.run.duration_s)));
        }
        require_positive("sweep.measurement_time_s", self.sweep.measurement_time_s)?;
        for &w in &self.sweep.windows_ns {
            require_positive("sweep.windows_ns", w)?;
        }
        self.drift.validate()?;
        let c = &self.calibration.settings;
        if c.fringe_setpoints_deg.len() < 8 {
            return Err(invalid("calibration.settings.fringe_setpoints_deg", "needs at least 8 setpoints"));
        }
        if c.xsweep.angles_deg.len() < 4 {
            return Err(invalid("calibration.settings.xsweep.angles_deg", "needs at least 4 angles"));
        }
        if c.max_cycles == 0 {
            return Err(invalid("calibration.settings.max_cycles", "must be at least 1"));
        }
        self.thresholds()?.validate()?;
        Ok(())
    }
}
