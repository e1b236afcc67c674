//! Drift processes and the feedback loops that hold them in check.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::SeedTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("`{name}` must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("`{name}` must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("phase chain needs exactly five loops, got {0}")]
    LoopCount(usize),
}

fn positive(name: &'static str, value: f64) -> Result<(), DriftError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(DriftError::NotPositive { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<(), DriftError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(DriftError::Negative { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Timing,
    Phase,
    Frequency,
    Polarization,
}

/// Sinusoidal daily modulation added on top of the walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diurnal {
    pub amplitude: f64,
    pub period_s: f64,
}

/// Gaussian random walk in the channel's natural unit (ps, rad, MHz, rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftProcess {
    pub kind: DriftKind,
    /// Standard deviation of the increment over one second.
    pub step_std_per_sqrt_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diurnal: Option<Diurnal>,
    pub seed: u64,
}

impl DriftProcess {
    /// Fiber-length drift: 5 ps per √minute.
    pub fn fiber_timing(seed: u64) -> Self {
        Self { kind: DriftKind::Timing, step_std_per_sqrt_s: 5.0 / 60f64.sqrt(), diurnal: None, seed }
    }

    /// Laser frequency walk in MHz, spanning tens of MHz per day.
    pub fn laser_frequency(seed: u64) -> Self {
        Self { kind: DriftKind::Frequency, step_std_per_sqrt_s: 0.2, diurnal: None, seed }
    }

    /// Per-axis angular diffusion on the Poincaré sphere, rad per √s.
    pub fn fiber_polarization(seed: u64) -> Self {
        Self { kind: DriftKind::Polarization, step_std_per_sqrt_s: 0.1, diurnal: None, seed }
    }

    fn rng(&self) -> rand_chacha::ChaCha8Rng {
        SeedTree::new(self.seed).rng("drift")
    }
}

/// Uniformly sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrace {
    pub dt_s: f64,
    pub values: Vec<f64>,
}

impl DriftTrace {
    pub fn duration_s(&self) -> f64 {
        self.dt_s * self.values.len().saturating_sub(1) as f64
    }

    pub fn peak_to_peak(&self) -> f64 {
        let (lo, hi) =
            self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if self.values.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    /// Increments over `lag` samples.
    pub fn increments(&self, lag: usize) -> Vec<f64> {
        if lag == 0 || self.values.len() <= lag {
            return Vec::new();
        }
        self.values.windows(lag + 1).step_by(lag).map(|w| w[lag] - w[0]).collect()
    }
}

/// Random walk (plus optional diurnal term) starting at zero.
pub fn simulate_drift(p: &DriftProcess, duration_s: f64, dt_s: f64) -> Result<DriftTrace, DriftError> {
    positive("duration", duration_s)?;
    positive("dt", dt_s)?;
    non_negative("step_std", p.step_std_per_sqrt_s)?;
    let n = (duration_s / dt_s).round() as usize;
    let mut rng = p.rng();
    let step = p.step_std_per_sqrt_s * dt_s.sqrt();
    let mut walk = 0.0;
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 && step > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            walk += step * z;
        }
        let t = i as f64 * dt_s;
        let daily = p.diurnal.map(|d| d.amplitude * (std::f64::consts::TAU * t / d.period_s).sin()).unwrap_or(0.0);
        values.push(walk + daily);
    }
    Ok(DriftTrace { dt_s, values })
}

/// Normalized histogram of a residual series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_centers: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Histogram {
    /// Fixed-width histogram over `[lo, hi]`; samples outside are clamped to
    /// the edge bins so total mass stays 1. A zero-width range collapses to
    /// a single bin.
    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        if samples.is_empty() {
            return Self { bin_centers: Vec::new(), probabilities: Vec::new() };
        }
        if hi <= lo || bins == 0 {
            return Self { bin_centers: vec![lo], probabilities: vec![1.0] };
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in samples {
            let i = ((x - lo) / width).floor();
            let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
            counts[i] += 1;
        }
        let n = samples.len() as f64;
        Self {
            bin_centers: (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect(),
            probabilities: counts.iter().map(|&c| c as f64 / n).collect(),
        }
    }

    /// Symmetric histogram spanning the sample range.
    pub fn auto(samples: &[f64], bins: usize) -> Self {
        let m = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if m == 0.0 {
            Self::from_samples(samples, 0.0, 0.0, bins)
        } else {
            Self::from_samples(samples, -m, m, bins)
        }
    }

    pub fn mass(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// CSV with columns `bin_center,probability`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,probability\n");
        for (c, p) in self.bin_centers.iter().zip(&self.probabilities) {
            out.push_str(&format!("{c},{p}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub histogram: Histogram,
    pub std: f64,
    pub bound: f64,
    pub fraction_within_bound: f64,
}

impl ResidualStats {
    pub fn from_samples(samples: &[f64], bound: f64, bins: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let within = samples.iter().filter(|x| x.abs() <= bound).count() as f64 / n;
        Self { histogram: Histogram::auto(samples, bins), std, bound, fraction_within_bound: within }
    }
}

/// Root mean square of a series around zero.
pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Periodic re-zeroing: at every correction instant the current drift is
/// measured and subtracted from all later samples.
pub fn sampled_correction_residuals(drift: &DriftTrace, interval_s: f64) -> Result<Vec<f64>, DriftError> {
    positive("interval", interval_s)?;
    let every = ((interval_s / drift.dt_s).round() as usize).max(1);
    let mut offset = drift.values.first().copied().unwrap_or(0.0);
    Ok(drift
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i % every == 0 {
                offset = v;
            }
            v - offset
        })
        .collect())
}

pub fn run_sampled_correction(drift: &DriftTrace, interval_s: f64, bound: f64) -> Result<ResidualStats, DriftError> {
    let r = sampled_correction_residuals(drift, interval_s)?;
    Ok(ResidualStats::from_samples(&r, bound, 81))
}

/// Time-averaged residual std of a walk re-zeroed every `interval_s`:
/// the mean of `σ²s` over `s ∈ [0, τ]` is `σ²τ/2`.
pub fn sampled_correction_expected_std(step_std_per_sqrt_s: f64, interval_s: f64) -> f64 {
    step_std_per_sqrt_s * (interval_s / 2.0).sqrt()
}

/// Spectral component of a phase-noise input, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseComponent {
    /// Brownian phase with the given diffusion constant (rad²/s).
    RandomWalk { diffusion: f64 },
    /// Broadband noise far above every loop bandwidth.
    White { std: f64 },
    /// Single tone.
    Tone { frequency_hz: f64, amplitude: f64 },
}

/// One stabilization loop and the noise injected on its segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseLoop {
    pub name: String,
    pub bandwidth_hz: f64,
    pub enabled: bool,
    pub noise: Vec<NoiseComponent>,
}

/// Five loops: two local, two fast midpoint, and the global loop last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseChain {
    pub loops: Vec<PhaseLoop>,
    /// Low-pass applied to the global loop's error signal.
    pub global_lowpass_hz: f64,
}

/// Power gain of a first-order high-pass with corner `fc` at frequency `f`.
fn highpass_gain(f: f64, fc: f64) -> f64 {
    f * f / (f * f + fc * fc)
}

impl PhaseChain {
    /// Reverse-calibrated to a ~35° total residual.
    pub fn delayed_choice() -> Self {
        let local = |name: &str| PhaseLoop {
            name: name.to_string(),
            bandwidth_hz: 10e3,
            enabled: true,
            noise: vec![
                NoiseComponent::RandomWalk { diffusion: 9.0e3 },
                NoiseComponent::White { std: 0.04 },
                NoiseComponent::Tone { frequency_hz: 50.0, amplitude: 1.0 },
            ],
        };
        let fast = |name: &str| PhaseLoop {
            name: name.to_string(),
            bandwidth_hz: 200e3,
            enabled: true,
            noise: vec![NoiseComponent::RandomWalk { diffusion: 1.5e5 }, NoiseComponent::White { std: 0.04 }],
        };
        Self {
            loops: vec![
                local("local_delft"),
                local("local_the_hague"),
                fast("midpoint_delft"),
                fast("midpoint_the_hague"),
                PhaseLoop {
                    name: "global".to_string(),
                    bandwidth_hz: 30.0,
                    enabled: true,
                    noise: vec![
                        NoiseComponent::RandomWalk { diffusion: 40.0 },
                        NoiseComponent::Tone { frequency_hz: 0.2, amplitude: 3.0 },
                    ],
                },
            ],
            global_lowpass_hz: 150.0,
        }
    }

    /// Delayed-choice chain plus the track-and-hold bias on both local loops.
    pub fn heralded() -> Self {
        let mut chain = Self::delayed_choice();
        let inflation = HERALDED_HOLD_INFLATION_DEG.to_radians() / 2f64.sqrt();
        for l in chain.loops.iter_mut().take(2) {
            l.noise.push(NoiseComponent::White { std: inflation });
        }
        chain
    }

    fn validate(&self) -> Result<(), DriftError> {
        if self.loops.len() != 5 {
            return Err(DriftError::LoopCount(self.loops.len()));
        }
        for l in &self.loops {
            positive("bandwidth_hz", l.bandwidth_hz)?;
        }
        positive("global_lowpass_hz", self.global_lowpass_hz)
    }

    /// Bandwidth the global loop actually achieves behind its low-pass.
    pub fn global_bandwidth_hz(&self) -> f64 {
        self.loops[4].bandwidth_hz.min(self.global_lowpass_hz)
    }
}

/// Extra residual of the heralded configuration from the local-phase
/// track-and-hold bias, added in quadrature.
pub const HERALDED_HOLD_INFLATION_DEG: f64 = 28.76;

/// Analytic residual variance per loop and in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResidual {
    pub per_loop_std_deg: Vec<f64>,
    pub total_std_deg: f64,
}

/// Residual variance of one component behind local high-pass `fc` and,
/// when present, the global high-pass `fg`.
fn component_variance(c: &NoiseComponent, fc: Option<f64>, fg: Option<f64>) -> f64 {
    use std::f64::consts::TAU;
    match *c {
        NoiseComponent::RandomWalk { diffusion } => {
            // Brownian phase behind first-order loops: an OU process whose
            // variance is D / (2(ω₁ + ω₂)).
            let w: f64 = fc.iter().chain(fg.iter()).map(|f| TAU * f).sum();
            if w == 0.0 {
                f64::INFINITY
            } else {
                diffusion / (2.0 * w)
            }
        }
        NoiseComponent::White { std } => std * std,
        NoiseComponent::Tone { frequency_hz, amplitude } => {
            let g = fc.map(|f| highpass_gain(frequency_hz, f)).unwrap_or(1.0)
                * fg.map(|f| highpass_gain(frequency_hz, f)).unwrap_or(1.0);
            0.5 * amplitude * amplitude * g
        }
    }
}

/// Total residual phase: each segment behind its own loop, then the global
/// loop acting on the sum; variances add.
pub fn run_phase_lock_chain(chain: &PhaseChain) -> Result<ChainResidual, DriftError> {
    chain.validate()?;
    let global = chain.loops[4].enabled.then(|| chain.global_bandwidth_hz());
    let mut per_loop = Vec::with_capacity(5);
    let mut total = 0.0;
    for (i, l) in chain.loops.iter().enumerate() {
        let own = if i == 4 { None } else { l.enabled.then_some(l.bandwidth_hz) };
        let var: f64 = l.noise.iter().map(|c| component_variance(c, own, global)).sum();
        per_loop.push(var.sqrt().to_degrees());
        total += var;
    }
    Ok(ChainResidual { per_loop_std_deg: per_loop, total_std_deg: total.sqrt().to_degrees() })
}

/// Time-domain simulation of the chain with discrete first-order loops.
/// Returns residual samples in degrees.
pub fn simulate_phase_chain(
    chain: &PhaseChain,
    duration_s: f64,
    dt_s: f64,
    seeds: &SeedTree,
) -> Result<Vec<f64>, DriftError> {
    chain.validate()?;
    positive("duration", duration_s)?;
    positive("dt", dt_s)?;
    let n = (duration_s / dt_s).round() as usize;
    let mut rng = seeds.rng("phase_chain");
    let global_gain =
        chain.loops[4].enabled.then(|| (std::f64::consts::TAU * chain.global_bandwidth_hz() * dt_s).min(1.0));

    struct State {
        walk: Vec<f64>,
        tone_phase: Vec<f64>,
        correction: f64,
    }
    let mut states: Vec<State> = chain
        .loops
        .iter()
        .map(|l| State {
            walk: vec![0.0; l.noise.len()],
            tone_phase: l.noise.iter().map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect(),
            correction: 0.0,
        })
        .collect();
    let mut global_correction = 0.0;
    let mut out = Vec::with_capacity(n);
    for step in 0..n {
        let t = step as f64 * dt_s;
        let mut combined = 0.0;
        for (i, (l, s)) in chain.loops.iter().zip(states.iter_mut()).enumerate() {
            let mut x = 0.0;
            for (j, c) in l.noise.iter().enumerate() {
                x += match *c {
                    NoiseComponent::RandomWalk { diffusion } => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        s.walk[j] += (diffusion * dt_s).sqrt() * z;
                        s.walk[j]
                    }
                    NoiseComponent::White { std } => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    }
                    NoiseComponent::Tone { frequency_hz, amplitude } => {
                        amplitude * (std::f64::consts::TAU * frequency_hz * t + s.tone_phase[j]).sin()
                    }
                };
            }
            let residual = x - s.correction;
            if i < 4 && l.enabled {
                let g = (std::f64::consts::TAU * l.bandwidth_hz * dt_s).min(1.0);
                // The white part is broadband; the loop tracks only the
                // slow parts, so integrate the residual.
                s.correction += g * residual;
            }
            combined += residual;
        }
        let r = combined - global_correction;
        if let Some(g) = global_gain {
            global_correction += g * r;
        }
        out.push(r.to_degrees());
    }
    Ok(out)
}

/// Outcome of the two-stage frequency loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub saturation_events: usize,
    pub slow_corrections: usize,
    pub max_fast_excursion: f64,
    pub drift_peak_to_peak: f64,
}

/// Fast-actuator setting over time: the frequency error not yet absorbed by
/// the slow loop, which runs at `slow_rate_hz` and recenters the fast
/// actuator. Also returns how many slow corrections were made.
pub fn fast_actuator_trace(slow_rate_hz: Option<f64>, drift: &DriftTrace) -> Result<(Vec<f64>, usize), DriftError> {
    if let Some(r) = slow_rate_hz {
        positive("slow_rate_hz", r)?;
    }
    let every = slow_rate_hz.map(|r| ((1.0 / r) / drift.dt_s).round().max(1.0) as usize);
    let mut slow = drift.values.first().copied().unwrap_or(0.0);
    let mut corrections = 0;
    let mut out = Vec::with_capacity(drift.values.len());
    for (i, &v) in drift.values.iter().enumerate() {
        let fast = v - slow;
        out.push(fast);
        if let Some(e) = every {
            if i % e == 0 && fast != 0.0 {
                slow += fast;
                corrections += 1;
            }
        }
    }
    Ok((out, corrections))
}

/// Fast actuator absorbs the frequency error; a slow loop at `slow_rate_hz`
/// moves the conversion pump to bring the fast actuator back to center.
pub fn run_desaturation(
    fast_range: f64,
    slow_rate_hz: Option<f64>,
    drift: &DriftTrace,
) -> Result<SaturationReport, DriftError> {
    positive("fast_range", fast_range)?;
    let (fast, corrections) = fast_actuator_trace(slow_rate_hz, drift)?;
    let mut saturations = 0;
    let mut saturated = false;
    for f in &fast {
        let now = f.abs() > fast_range;
        if now && !saturated {
            saturations += 1;
        }
        saturated = now;
    }
    Ok(SaturationReport {
        saturation_events: saturations,
        slow_corrections: corrections,
        max_fast_excursion: fast.iter().fold(0.0f64, |m, f| m.max(f.abs())),
        drift_peak_to_peak: drift.peak_to_peak(),
    })
}

type Vec3 = [f64; 3];

fn rotate(v: Vec3, axis: usize, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut out = v;
    out[i] = c * v[i] - s * v[j];
    out[j] = s * v[i] + c * v[j];
    out
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Overlap of a Stokes vector with the polarizer axis `(1, 0, 0)`.
pub fn polarizer_overlap(s: Vec3) -> f64 {
    0.5 * (1.0 + s[0])
}

/// Polarization drift on the Poincaré sphere: independent small rotations
/// about the three axes.
pub fn simulate_polarization_drift(p: &DriftProcess, duration_s: f64, dt_s: f64) -> Result<Vec<Vec3>, DriftError> {
    positive("duration", duration_s)?;
    positive("dt", dt_s)?;
    non_negative("step_std", p.step_std_per_sqrt_s)?;
    let n = (duration_s / dt_s).round() as usize;
    let mut rng = p.rng();
    let step = p.step_std_per_sqrt_s * dt_s.sqrt();
    let mut s: Vec3 = [1.0, 0.0, 0.0];
    let mut out = Vec::with_capacity(n + 1);
    out.push(s);
    for _ in 0..n {
        for axis in 0..3 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s = rotate(s, axis, step * z);
        }
        s = normalize(s);
        out.push(s);
    }
    Ok(out)
}

/// Gradient-ascent settings of the polarization controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarizationController {
    pub feedback_rate_hz: f64,
    /// Dither used for the finite-difference gradient, radians.
    pub dither: f64,
    /// Step per unit gradient.
    pub gain: f64,
}

impl Default for PolarizationController {
    fn default() -> Self {
        Self { feedback_rate_hz: 5.0, dither: 0.02, gain: 2.0 }
    }
}

/// Applies the controller's rotation (about y then z) to the incoming
/// Stokes vector at every sample and updates it by gradient ascent at the
/// feedback rate. `None` leaves the controller off.
pub fn run_polarization_feedback(
    drift: &[Vec3],
    dt_s: f64,
    controller: Option<PolarizationController>,
) -> Result<ResidualStats, DriftError> {
    positive("dt", dt_s)?;
    let mut angles = [0.0f64; 2];
    let apply = |s: Vec3, a: [f64; 2]| rotate(rotate(s, 1, a[0]), 2, a[1]);
    let every = match controller {
        Some(c) => {
            positive("feedback_rate_hz", c.feedback_rate_hz)?;
            Some(((1.0 / c.feedback_rate_hz) / dt_s).round().max(1.0) as usize)
        }
        None => None,
    };
    let mut overlaps = Vec::with_capacity(drift.len());
    for (i, &s) in drift.iter().enumerate() {
        if let (Some(c), Some(e)) = (controller, every) {
            if i % e == 0 {
                let mut grad = [0.0; 2];
                for k in 0..2 {
                    let mut plus = angles;
                    let mut minus = angles;
                    plus[k] += c.dither;
                    minus[k] -= c.dither;
                    grad[k] =
                        (polarizer_overlap(apply(s, plus)) - polarizer_overlap(apply(s, minus))) / (2.0 * c.dither);
                }
                angles[0] += c.gain * grad[0];
                angles[1] += c.gain * grad[1];
            }
        }
        overlaps.push(polarizer_overlap(apply(s, angles)));
    }
    let n = overlaps.len().max(1) as f64;
    let mean = overlaps.iter().sum::<f64>() / n;
    let std = (overlaps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let within = overlaps.iter().filter(|&&x| x >= 0.95).count() as f64 / n;
    Ok(ResidualStats {
        histogram: Histogram::from_samples(&overlaps, 0.0, 1.0, 100),
        std,
        bound: 0.95,
        fraction_within_bound: within,
    })
}

/// Mean polarizer overlap of a run, a convenience for diagnostics.
pub fn mean_overlap(stats: &ResidualStats) -> f64 {
    stats.histogram.bin_centers.iter().zip(&stats.histogram.probabilities).map(|(c, p)| c * p).sum()
}

/// Bell-state infidelity from a timing offset between the two wavepackets.
/// The amplitude overlap of exponential wavepackets displaced by `δ` is
/// `exp(−δ/2T)`; the coherence term shrinks by that factor.
pub fn timing_offset_infidelity(offset_ps: f64, decay_ns: f64) -> f64 {
    let overlap = (-(offset_ps.abs() * 1e-3) / (2.0 * decay_ns)).exp();
    0.5 * (1.0 - overlap)
}

/// Bell-state infidelity from Gaussian residual phase noise.
pub fn phase_residual_infidelity(std_deg: f64) -> f64 {
    let s = std_deg.to_radians();
    0.5 * (1.0 - (-0.5 * s * s).exp())
}
