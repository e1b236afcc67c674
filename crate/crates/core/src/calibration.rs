//! Calibration orchestration: SNR, optical phase fringe, entangled-state
//! phase and FID blocks with threshold gates and CR-rate breakout.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantum::{Detector, Level};
use crate::singleclick::{herald_operators, snr, LinkParameters, ModelError, PerNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {needed} points spanning 360 degrees, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points do not span the full circle")]
    InsufficientSpan,
    #[error("`{name}` must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("cosine fit is degenerate")]
    DegenerateFit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Wraps an angle in degrees to `[0, 360)`.
pub fn wrap_degrees(x: f64) -> f64 {
    let r = x.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Least-squares fit of `offset + amplitude · cos(x − phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineFit {
    pub offset: f64,
    pub amplitude: f64,
    pub phase_deg: f64,
    pub amplitude_err: f64,
    pub phase_err_deg: f64,
}

impl CosineFit {
    pub fn eval(&self, x_deg: f64) -> f64 {
        self.offset + self.amplitude * (x_deg - self.phase_deg).to_radians().cos()
    }
}

/// Linear least squares on `a + b cos x + c sin x`; the parameter
/// covariance is scaled by the residual variance.
pub fn fit_cosine(x_deg: &[f64], y: &[f64]) -> Result<CosineFit, CalibrationError> {
    fit_cosine_impl(x_deg, y, None)
}

/// Weighted least squares with known per-point standard deviations; the
/// covariance comes from the stated errors alone.
pub fn fit_cosine_weighted(x_deg: &[f64], y: &[f64], sigma: &[f64]) -> Result<CosineFit, CalibrationError> {
    if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(CalibrationError::DegenerateFit);
    }
    fit_cosine_impl(x_deg, y, Some(sigma))
}

fn fit_cosine_impl(x_deg: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<CosineFit, CalibrationError> {
    let n = x_deg.len().min(y.len()).min(sigma.map_or(usize::MAX, <[f64]>::len));
    if n < 4 {
        return Err(CalibrationError::TooFewPoints { needed: 4, got: n });
    }
    let weight = |i: usize| sigma.map_or(1.0, |s| 1.0 / (s[i] * s[i]));
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for i in 0..n {
        let r = x_deg[i].to_radians();
        let row = Vector3::new(1.0, r.cos(), r.sin());
        xtx += row * row.transpose() * weight(i);
        xty += row * (y[i] * weight(i));
    }
    // Setpoints that do not separate cos from sin leave the normal matrix
    // singular up to rounding, which try_inverse alone does not catch.
    let eig = xtx.symmetric_eigenvalues();
    let well_conditioned = eig.min() > 1e-10 * eig.max();
    if !well_conditioned {
        return Err(CalibrationError::DegenerateFit);
    }
    let inv = xtx.try_inverse().ok_or(CalibrationError::DegenerateFit)?;
    let beta = inv * xty;
    let (a, b, c) = (beta[0], beta[1], beta[2]);
    let cov = match sigma {
        Some(_) => inv,
        None => {
            let rss: f64 = (0..n)
                .map(|i| {
                    let r = x_deg[i].to_radians();
                    (y[i] - a - b * r.cos() - c * r.sin()).powi(2)
                })
                .sum();
            inv * (rss / (n as f64 - 3.0).max(1.0))
        }
    };
    let amp = b.hypot(c);
    let (amp_err, phase_err) = if amp > 0.0 {
        let var_amp = (b * b * cov[(1, 1)] + c * c * cov[(2, 2)] + 2.0 * b * c * cov[(1, 2)]) / (amp * amp);
        let var_phase = (c * c * cov[(1, 1)] + b * b * cov[(2, 2)] - 2.0 * b * c * cov[(1, 2)]) / amp.powi(4);
        (var_amp.max(0.0).sqrt(), var_phase.max(0.0).sqrt().to_degrees())
    } else {
        (0.0, 180.0)
    };
    Ok(CosineFit {
        offset: a,
        amplitude: amp,
        phase_deg: wrap_degrees(c.atan2(b).to_degrees()),
        amplitude_err: amp_err,
        phase_err_deg: phase_err,
    })
}

fn check_span(x_deg: &[f64], needed: usize) -> Result<(), CalibrationError> {
    if x_deg.len() < needed {
        return Err(CalibrationError::TooFewPoints { needed, got: x_deg.len() });
    }
    let mut w: Vec<f64> = x_deg.iter().map(|&x| wrap_degrees(x)).collect();
    w.sort_by(f64::total_cmp);
    let largest_gap =
        w.windows(2).map(|p| p[1] - p[0]).chain(std::iter::once(w[0] + 360.0 - w[w.len() - 1])).fold(0.0, f64::max);
    // Points spanning the circle leave no gap of half a turn or more.
    if largest_gap >= 180.0 {
        return Err(CalibrationError::InsufficientSpan);
    }
    Ok(())
}

/// Evenly spaced angles over the full circle.
pub fn full_circle(points: usize) -> Vec<f64> {
    (0..points).map(|i| 360.0 * i as f64 / points as f64).collect()
}

/// Counts per shot measured with bright-state (signal) and dark-state
/// (noise) shots. Each node's window sits 100 ns after the other's so the
/// two are measured independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrMeasurement {
    pub shots: u64,
    pub signal_cps: PerNode,
    pub noise_cps: PerNode,
    pub snr: f64,
    pub snr_err: f64,
}

/// Signal shots drive each node fully bright; the SNR weights them with the
/// configured `α` like the model does.
pub fn measure_snr<R: Rng + ?Sized>(
    p: &LinkParameters,
    shots: u64,
    rng: &mut R,
) -> Result<SnrMeasurement, CalibrationError> {
    p.validate()?;
    if shots == 0 {
        return Err(CalibrationError::NotPositive { name: "shots", value: 0.0 });
    }
    let noise_p: f64 = p.noise_click_probability().iter().sum();
    let mut sig = [0.0; 2];
    let mut noi = [0.0; 2];
    let mut sig_counts = [0u64; 2];
    let mut noise_counts = [0u64; 2];
    for n in 0..2 {
        let bright = 1.0 - (1.0 - p.node_detection(n)) * (1.0 - noise_p);
        sig_counts[n] = Binomial::new(shots, bright).expect("probability in range").sample(rng);
        noise_counts[n] = Binomial::new(shots, noise_p.min(1.0)).expect("probability in range").sample(rng);
        sig[n] = sig_counts[n] as f64 / shots as f64;
        noi[n] = noise_counts[n] as f64 / shots as f64;
    }
    let alpha = p.alpha.as_array();
    let noise_mean = 0.5 * (noi[0] + noi[1]);
    let signal: f64 = (0..2).map(|n| alpha[n] * (sig[n] - noi[n]).max(0.0)).sum();
    let (snr, snr_err) = if noise_mean > 0.0 {
        let s = shots as f64;
        let var_signal: f64 = (0..2).map(|n| alpha[n].powi(2) * (sig[n] + noi[n]) / s).sum();
        let var_noise = 0.25 * (noi[0] + noi[1]) / s;
        let r = signal / noise_mean;
        (r, r * (var_signal / signal.powi(2).max(f64::MIN_POSITIVE) + var_noise / noise_mean.powi(2)).sqrt())
    } else {
        (f64::INFINITY, 0.0)
    };
    Ok(SnrMeasurement {
        shots,
        signal_cps: PerNode::new(sig[0], sig[1]),
        noise_cps: PerNode::new(noi[0], noi[1]),
        snr,
        snr_err,
    })
}

/// Bright-pulse interference at the midpoint used for the optical phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FringeSource {
    /// Photon flux from Delft over flux from The Hague.
    pub flux_ratio: f64,
    pub mode_overlap: f64,
    pub phase_noise_std_deg: f64,
    /// Optical phase at setpoint zero.
    pub phase_offset_deg: f64,
    pub pulses_per_setpoint: u64,
    pub photons_per_pulse: f64,
}

impl FringeSource {
    pub fn from_physics(p: &LinkParameters) -> Self {
        Self {
            flux_ratio: p.detection_probability.delft / p.detection_probability.the_hague,
            mode_overlap: p.mode_overlap,
            phase_noise_std_deg: p.phase_noise_std_deg,
            phase_offset_deg: 0.0,
            pulses_per_setpoint: 2000,
            photons_per_pulse: 50.0,
        }
    }

    /// Visibility ceiling from unequal fluxes.
    pub fn imbalance_factor(&self) -> f64 {
        2.0 * self.flux_ratio.sqrt() / (1.0 + self.flux_ratio)
    }

    /// Contrast a perfect fit would return after the imbalance correction.
    pub fn expected_contrast(&self) -> f64 {
        let s = self.phase_noise_std_deg.to_radians();
        self.mode_overlap * (-0.5 * s * s).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCalibration {
    /// Fringe contrast corrected for flux imbalance, in `[0, 1]`.
    pub contrast: f64,
    /// Fitted optical phase: the setpoint of maximal detector-1 excess.
    pub optical_phase_deg: f64,
    pub optical_phase_err_deg: f64,
    /// Fitted entangled-state phase, filled in by the XsweepX stage.
    pub state_phase_deg: Option<f64>,
    pub state_phase_err_deg: Option<f64>,
}

/// Normalized detector difference `(n1 − n2)/(n1 + n2)` per setpoint, fitted
/// with a single cosine.
pub fn measure_phase_fringe<R: Rng + ?Sized>(
    source: &FringeSource,
    setpoints_deg: &[f64],
    rng: &mut R,
) -> Result<PhaseCalibration, CalibrationError> {
    check_span(setpoints_deg, 8)?;
    for (name, v) in [
        ("flux_ratio", source.flux_ratio),
        ("photons_per_pulse", source.photons_per_pulse),
        ("pulses_per_setpoint", source.pulses_per_setpoint as f64),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CalibrationError::NotPositive { name, value: v });
        }
    }
    let visibility = source.mode_overlap * source.imbalance_factor();
    let noise = Normal::new(0.0, source.phase_noise_std_deg.to_radians()).expect("std validated");
    let photons = Poisson::new(source.photons_per_pulse).expect("rate validated");
    let mut values = Vec::with_capacity(setpoints_deg.len());
    for &s in setpoints_deg {
        let (mut n1, mut n2) = (0u64, 0u64);
        for _ in 0..source.pulses_per_setpoint {
            let phi = (s - source.phase_offset_deg).to_radians() + noise.sample(rng);
            let p1 = (0.5 * (1.0 + visibility * phi.cos())).clamp(0.0, 1.0);
            let n = photons.sample(rng) as u64;
            let k = Binomial::new(n, p1).expect("probability in range").sample(rng);
            n1 += k;
            n2 += n - k;
        }
        let total = (n1 + n2).max(1) as f64;
        values.push((n1 as f64 - n2 as f64) / total);
    }
    let fit = fit_cosine(setpoints_deg, &values)?;
    Ok(PhaseCalibration {
        contrast: (fit.amplitude / source.imbalance_factor()).clamp(0.0, 1.0),
        optical_phase_deg: fit.phase_deg,
        optical_phase_err_deg: fit.phase_err_deg,
        state_phase_deg: None,
        state_phase_err_deg: None,
    })
}

/// XsweepX stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XsweepSettings {
    pub angles_deg: Vec<f64>,
    pub shots_per_angle: u64,
    /// Entangled-state phase at optical setpoint zero.
    pub state_phase_offset_deg: f64,
}

impl Default for XsweepSettings {
    fn default() -> Self {
        Self { angles_deg: full_circle(12), shots_per_angle: 250, state_phase_offset_deg: 219.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XsweepResult {
    pub fit: CosineFit,
    /// Fitted entangled-state phase `θ` of `(|01⟩ + e^{iθ}|10⟩)/√2`.
    pub state_phase_deg: f64,
    pub state_phase_err_deg: f64,
    /// `⟨X ⊗ M(β)⟩` amplitude expected from the delivered state.
    pub expected_amplitude: f64,
}

/// Entangled-state phase at an optical setpoint.
pub fn state_phase_deg(setpoint_deg: f64, offset_deg: f64) -> f64 {
    wrap_degrees(offset_deg + setpoint_deg)
}

/// `⟨X ⊗ (cos β X + sin β Y)⟩` of the detector-1 state; a dark node reads
/// −1, so only the doubly ionized population adds to the qubit term.
fn x_sweep_expectation(p: &LinkParameters, theta: f64, beta: f64) -> Result<(f64, f64), CalibrationError> {
    let ops = herald_operators(p, theta, true)?;
    let state = ops[Detector::One.index()].to_state()?;
    let c = state.coherence();
    let coherence = 2.0 * (c * num_complex::Complex64::from_polar(1.0, -beta)).re;
    let dark = if state.dim() == 9 { state.population(Level::Ionized, Level::Ionized) } else { 0.0 };
    Ok((coherence + dark, 2.0 * c.norm()))
}

/// Reads Delft in X and The Hague along a swept equatorial axis, then fits
/// `cos(β + θ)` to recover the entangled-state phase.
pub fn measure_xsweepx<R: Rng + ?Sized>(
    p: &LinkParameters,
    setpoint_deg: f64,
    settings: &XsweepSettings,
    rng: &mut R,
) -> Result<XsweepResult, CalibrationError> {
    check_span(&settings.angles_deg, 4)?;
    if settings.shots_per_angle == 0 {
        return Err(CalibrationError::NotPositive { name: "shots_per_angle", value: 0.0 });
    }
    let theta = state_phase_deg(setpoint_deg, settings.state_phase_offset_deg).to_radians();
    let readout = p.readout_fidelity.as_array().iter().map(|f| 2.0 * f - 1.0).product::<f64>();
    let mut values = Vec::with_capacity(settings.angles_deg.len());
    let mut sigma = Vec::with_capacity(settings.angles_deg.len());
    let mut amplitude = 0.0;
    for &b in &settings.angles_deg {
        let (e, amp) = x_sweep_expectation(p, theta, b.to_radians())?;
        amplitude = amp * readout;
        let p_same = (0.5 * (1.0 + readout * e)).clamp(0.0, 1.0);
        let same = Binomial::new(settings.shots_per_angle, p_same).expect("probability in range").sample(rng);
        let mean = 2.0 * same as f64 / settings.shots_per_angle as f64 - 1.0;
        values.push(mean);
        // Binomial error of the mean, floored so a saturated point keeps weight.
        let shots = settings.shots_per_angle as f64;
        sigma.push(((1.0 - mean * mean).max(1.0 / shots) / shots).sqrt());
    }
    let fit = fit_cosine_weighted(&settings.angles_deg, &values, &sigma)?;
    Ok(XsweepResult {
        fit,
        state_phase_deg: wrap_degrees(-fit.phase_deg),
        state_phase_err_deg: fit.phase_err_deg,
        expected_amplitude: amplitude,
    })
}

/// Gate values of the calibration cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationThresholds {
    /// Minimum telecom counts per signal shot, per node.
    pub min_counts_per_shot: PerNode,
    pub min_contrast: f64,
    pub max_phase_uncertainty_deg: f64,
    /// Successful CR checks per FID block.
    pub fid_block_size: u64,
}

/// Share of the nominal value used for each gate.
pub const NOMINAL_THRESHOLD_FRACTION: f64 = 0.8;

impl CalibrationThresholds {
    /// Gates at 80% of the nominal simulated values.
    pub fn nominal(p: &LinkParameters, settings: &CalibrationSettings) -> Result<Self, CalibrationError> {
        let k = NOMINAL_THRESHOLD_FRACTION;
        let source = FringeSource::from_physics(p);
        let ops = herald_operators(p, 0.0, true)?;
        let state = ops[Detector::One.index()].to_state()?;
        let readout = p.readout_fidelity.as_array().iter().map(|f| 2.0 * f - 1.0).product::<f64>();
        let amplitude = 2.0 * state.coherence().norm() * readout;
        let n = settings.xsweep.angles_deg.len() as f64;
        let shot_std = 1.0 / (settings.xsweep.shots_per_angle as f64).sqrt();
        let phase_err = (shot_std / (amplitude * (0.5 * n).sqrt())).to_degrees();
        Ok(Self {
            min_counts_per_shot: PerNode::new(k * p.node_detection(0), k * p.node_detection(1)),
            min_contrast: k * source.expected_contrast(),
            max_phase_uncertainty_deg: phase_err / k,
            fid_block_size: settings.block_size,
        })
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        for (name, v) in [
            ("min_counts_per_shot.delft", self.min_counts_per_shot.delft),
            ("min_counts_per_shot.the_hague", self.min_counts_per_shot.the_hague),
            ("min_contrast", self.min_contrast),
            ("max_phase_uncertainty_deg", self.max_phase_uncertainty_deg),
            ("fid_block_size", self.fid_block_size as f64),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CalibrationError::NotPositive { name, value: v });
            }
        }
        Ok(())
    }
}

/// FID block sizes in successful CR checks.
pub const HERALDED_BLOCK_SIZE: u64 = 10_000;
pub const DELAYED_CHOICE_BLOCK_SIZE: u64 = 30_000;

/// CR pass probability change injected from a given FID block on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrDegradation {
    pub from_block: u32,
    pub pass_probability: PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    pub snr_shots: u64,
    pub fringe_setpoints_deg: Vec<f64>,
    pub xsweep: XsweepSettings,
    pub block_size: u64,
    pub fid_blocks: u32,
    pub max_cycles: u32,
    pub cr_pass_probability: PerNode,
    /// CR checks sampled during SNR to fix the breakout reference.
    pub cr_reference_checks: u64,
    /// Optical setpoint used for FID and XsweepX.
    pub setpoint_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr_degradation: Option<CrDegradation>,
}

impl CalibrationSettings {
    pub fn heralded() -> Self {
        Self::with_block_size(HERALDED_BLOCK_SIZE)
    }

    pub fn delayed_choice() -> Self {
        Self::with_block_size(DELAYED_CHOICE_BLOCK_SIZE)
    }

    fn with_block_size(block_size: u64) -> Self {
        Self {
            snr_shots: 10_000_000_000,
            fringe_setpoints_deg: full_circle(16),
            xsweep: XsweepSettings::default(),
            block_size,
            fid_blocks: 5,
            max_cycles: 5,
            cr_pass_probability: PerNode::both(0.0469),
            cr_reference_checks: 200_000,
            setpoint_deg: 0.0,
            cr_degradation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Snr,
    Phase,
    Xsweepx,
    Fid,
    PhaseRecheck,
    Done,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Snr, Stage::Phase, Stage::Xsweepx, Stage::Fid, Stage::PhaseRecheck, Stage::Done];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Pass,
    Fail,
    BlockComplete,
    Breakout,
}

impl StageOutcome {
    pub const ALL: [StageOutcome; 4] =
        [StageOutcome::Pass, StageOutcome::Fail, StageOutcome::BlockComplete, StageOutcome::Breakout];
}

/// Transition table of the calibration flowchart. Any failure, breakout or
/// outcome foreign to a stage restarts from SNR.
pub fn next_stage(stage: Stage, outcome: StageOutcome) -> Stage {
    use Stage::*;
    use StageOutcome::*;
    match (stage, outcome) {
        (Done, _) => Done,
        (Snr, Pass) => Phase,
        (Phase, Pass) => Xsweepx,
        (Xsweepx, Pass) => Fid,
        (Fid, BlockComplete) => Fid,
        (Fid, Pass) => PhaseRecheck,
        (PhaseRecheck, Pass) => Done,
        (Snr | Phase | Xsweepx | Fid | PhaseRecheck, Fail | Breakout)
        | (Snr | Phase | Xsweepx | PhaseRecheck, BlockComplete) => Snr,
    }
}

/// One gate evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub cycle: u32,
    pub stage: Stage,
    pub outcome: StageOutcome,
    pub values: Vec<GateValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateValue {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
}

/// Calibration values in force when a block ran.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub setpoint_deg: f64,
    pub optical_phase_deg: f64,
    pub state_phase_deg: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidBlock {
    pub cycle: u32,
    pub index: u32,
    pub cr_tries: PerNode,
    pub cr_pass_rate: PerNode,
    pub cr_reference: PerNode,
    pub breakout: bool,
    pub calibration: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub thresholds: CalibrationThresholds,
    pub stages: Vec<StageRecord>,
    pub blocks: Vec<FidBlock>,
    pub cycles: u32,
    pub restarts: u32,
    pub completed: bool,
    pub snr: Option<SnrMeasurement>,
    pub phase: Option<PhaseCalibration>,
}

/// Successful CR checks need this many tries: `k` plus negative-binomial
/// failures, drawn through the Gamma–Poisson mixture.
fn cr_tries<R: Rng + ?Sized>(successes: u64, q: f64, rng: &mut R) -> u64 {
    if q >= 1.0 {
        return successes;
    }
    let lambda = Gamma::new(successes as f64, (1.0 - q) / q).expect("shape positive").sample(rng);
    if lambda <= 0.0 {
        return successes;
    }
    successes + Poisson::new(lambda).expect("rate positive").sample(rng) as u64
}

/// Runs the flowchart until the FID blocks and the closing phase check pass
/// or `max_cycles` cycles have started.
pub fn run_calibration_cycle<R: Rng + ?Sized>(
    thresholds: &CalibrationThresholds,
    p: &LinkParameters,
    settings: &CalibrationSettings,
    rng: &mut R,
) -> Result<CalibrationReport, CalibrationError> {
    thresholds.validate()?;
    p.validate()?;
    let source = FringeSource::from_physics(p);
    let mut report = CalibrationReport {
        thresholds: *thresholds,
        stages: Vec::new(),
        blocks: Vec::new(),
        cycles: 0,
        restarts: 0,
        completed: false,
        snr: None,
        phase: None,
    };
    let mut stage = Stage::Snr;
    let mut cycle = 0;
    let mut global_block = 0u32;
    let mut cycle_blocks = 0u32;
    let mut cr_reference = [0.0; 2];
    let mut snr_value = 0.0;
    let mut phase: Option<PhaseCalibration> = None;
    // Gates passed in the current cycle, in order; FID requires all three.
    let mut gates_passed = 0;

    while stage != Stage::Done {
        let (outcome, values) = match stage {
            Stage::Snr => {
                if cycle == settings.max_cycles {
                    break;
                }
                cycle += 1;
                cycle_blocks = 0;
                gates_passed = 0;
                let m = measure_snr(p, settings.snr_shots, rng)?;
                let q = settings.cr_pass_probability.as_array();
                let q = current_cr(settings, global_block, q);
                for n in 0..2 {
                    let passes = Binomial::new(settings.cr_reference_checks, q[n]).expect("probability").sample(rng);
                    cr_reference[n] = passes as f64 / settings.cr_reference_checks as f64;
                }
                snr_value = m.snr;
                report.snr = Some(m);
                let min = thresholds.min_counts_per_shot.as_array();
                let values = vec![
                    gate("counts_per_shot.delft", m.signal_cps.delft, min[0]),
                    gate("counts_per_shot.the_hague", m.signal_cps.the_hague, min[1]),
                ];
                let ok = m.signal_cps.delft >= min[0] && m.signal_cps.the_hague >= min[1];
                (pass_if(ok), values)
            }
            Stage::Phase | Stage::PhaseRecheck => {
                let cal = measure_phase_fringe(&source, &settings.fringe_setpoints_deg, rng)?;
                let ok = cal.contrast >= thresholds.min_contrast;
                let values = vec![gate("contrast", cal.contrast, thresholds.min_contrast)];
                if stage == Stage::Phase {
                    phase = Some(cal);
                }
                (pass_if(ok), values)
            }
            Stage::Xsweepx => {
                let x = measure_xsweepx(p, settings.setpoint_deg, &settings.xsweep, rng)?;
                if let Some(c) = phase.as_mut() {
                    c.state_phase_deg = Some(x.state_phase_deg);
                    c.state_phase_err_deg = Some(x.state_phase_err_deg);
                }
                let ok = x.state_phase_err_deg <= thresholds.max_phase_uncertainty_deg;
                let values =
                    vec![gate("state_phase_err_deg", x.state_phase_err_deg, thresholds.max_phase_uncertainty_deg)];
                (pass_if(ok), values)
            }
            Stage::Fid => {
                assert_eq!(gates_passed, 3, "FID entered without all gates passing in this cycle");
                if cycle_blocks == settings.fid_blocks {
                    (StageOutcome::Pass, Vec::new())
                } else {
                    let q = current_cr(settings, global_block, settings.cr_pass_probability.as_array());
                    let mut tries = [0.0; 2];
                    let mut rate = [0.0; 2];
                    let mut breakout = false;
                    for n in 0..2 {
                        let t = cr_tries(thresholds.fid_block_size, q[n], rng);
                        tries[n] = t as f64;
                        rate[n] = thresholds.fid_block_size as f64 / t as f64;
                        // Both the block rate and the reference are binomial
                        // estimates; the test uses their combined error.
                        let inv = 1.0 / tries[n] + 1.0 / settings.cr_reference_checks as f64;
                        let se = (cr_reference[n] * (1.0 - cr_reference[n]) * inv).sqrt();
                        breakout |= rate[n] < cr_reference[n] - 3.0 * se;
                    }
                    let cal = phase.expect("phase stage passed");
                    report.blocks.push(FidBlock {
                        cycle,
                        index: global_block,
                        cr_tries: PerNode::new(tries[0], tries[1]),
                        cr_pass_rate: PerNode::new(rate[0], rate[1]),
                        cr_reference: PerNode::new(cr_reference[0], cr_reference[1]),
                        breakout,
                        calibration: Annotation {
                            setpoint_deg: settings.setpoint_deg,
                            optical_phase_deg: cal.optical_phase_deg,
                            state_phase_deg: cal.state_phase_deg.expect("xsweepx stage passed"),
                            snr: snr_value,
                        },
                    });
                    global_block += 1;
                    cycle_blocks += 1;
                    let values = vec![
                        gate("cr_pass_rate.delft", rate[0], cr_reference[0]),
                        gate("cr_pass_rate.the_hague", rate[1], cr_reference[1]),
                    ];
                    (if breakout { StageOutcome::Breakout } else { StageOutcome::BlockComplete }, values)
                }
            }
            Stage::Done => unreachable!("loop exits on Done"),
        };
        if matches!(stage, Stage::Snr | Stage::Phase | Stage::Xsweepx) && outcome == StageOutcome::Pass {
            gates_passed += 1;
        }
        report.stages.push(StageRecord { cycle, stage, outcome, values });
        let next = next_stage(stage, outcome);
        if next == Stage::Snr {
            report.restarts += 1;
        }
        stage = next;
    }
    report.cycles = cycle;
    report.completed = stage == Stage::Done;
    report.phase = phase;
    Ok(report)
}

fn current_cr(settings: &CalibrationSettings, block: u32, nominal: [f64; 2]) -> [f64; 2] {
    match settings.cr_degradation {
        Some(d) if block >= d.from_block => d.pass_probability.as_array(),
        _ => nominal,
    }
}

fn gate(name: &str, value: f64, threshold: f64) -> GateValue {
    GateValue { name: name.to_string(), value, threshold }
}

fn pass_if(ok: bool) -> StageOutcome {
    if ok {
        StageOutcome::Pass
    } else {
        StageOutcome::Fail
    }
}

/// Model SNR, for cross-checks against a measurement.
pub fn model_snr(p: &LinkParameters) -> f64 {
    snr(p).value()
}
