//! Single-click entanglement model.
//!
//! Each node prepares `√α|0> + √(1−α)|1>`, the bright level emits one photon,
//! and a click in exactly one midpoint detector heralds. The heralded operator
//! is built by enumerating, per node, {ionized, bright, dark} sources and the
//! fate of every photon (reaches the beam splitter, lost, caught by the local
//! phonon-sideband detector), with at most two photons per output mode.

use crate::quantum::{basis_index, Detector, Level, NodeReadout, ReadoutModel, TwoQubitState};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rabi angle at which the tabulated detection probabilities were measured.
pub const REFERENCE_RABI_ANGLE_DEG: f64 = 150.0;

/// Largest tolerated weight of heralds carrying three or more photons.
pub const CUTOFF_WEIGHT: f64 = 1e-6;

/// Conversion from FWHM to standard deviation for a Gaussian.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// `α` used for "ideal" budget rows; small enough to make `1 − α` negligible.
const IDEAL_ALPHA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` = {value} is outside its allowed range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("multi-photon heralds carry weight {0:.3e}, above the two-photon cutoff")]
    CutoffViolation(f64),
    #[error("no heralding events: success probability is zero")]
    NoHeralds,
}

/// A value per node (Delft, The Hague).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerNode {
    pub delft: f64,
    pub the_hague: f64,
}

impl PerNode {
    pub const fn new(delft: f64, the_hague: f64) -> Self {
        Self { delft, the_hague }
    }

    pub const fn both(v: f64) -> Self {
        Self { delft: v, the_hague: v }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.delft, self.the_hague]
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.delft + self.the_hague)
    }
}

/// A value per midpoint detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerDetector {
    pub one: f64,
    pub two: f64,
}

impl PerDetector {
    pub const fn new(one: f64, two: f64) -> Self {
        Self { one, two }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.one, self.two]
    }
}

/// Physical parameters of one link configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParameters {
    /// Probability that a bright-state emission is detected at the midpoint,
    /// quoted for `α = 1` and the reference window.
    pub detection_probability: PerNode,
    pub alpha: PerNode,
    pub background_hz: PerDetector,
    pub double_excitation: PerNode,
    pub phase_noise_std_deg: f64,
    pub dephasing: PerNode,
    pub spectral_diffusion_fwhm_mhz: f64,
    /// Static mode overlap at the central beam splitter.
    pub mode_overlap: f64,
    pub window_ns: f64,
    /// Window at which `detection_probability` was measured.
    pub reference_window_ns: f64,
    pub rabi_angle_deg: f64,
    pub ionization: PerNode,
    pub psb_efficiency: PerNode,
    pub decay_ns: f64,
    /// Average single-shot readout fidelity per node.
    pub readout_fidelity: PerNode,
}

impl LinkParameters {
    /// Delayed-choice (post-selected) column of the deployed-link budget.
    pub fn delayed_choice() -> Self {
        Self {
            detection_probability: PerNode::new(10.6e-6, 8.4e-6),
            alpha: PerNode::both(0.25),
            background_hz: PerDetector::new(40.3, 42.8),
            double_excitation: PerNode::new(0.04, 0.1),
            phase_noise_std_deg: 35.0,
            dephasing: PerNode::both(0.01),
            spectral_diffusion_fwhm_mhz: 13.0,
            mode_overlap: 0.95,
            window_ns: 10.0,
            reference_window_ns: 10.0,
            rabi_angle_deg: 150.0,
            ionization: PerNode::new(0.035, 0.045),
            psb_efficiency: PerNode::both(0.1),
            decay_ns: 12.0,
            readout_fidelity: PerNode::new(0.9514, 0.9449),
        }
    }

    /// Fully heralded column of the deployed-link budget.
    pub fn heralded() -> Self {
        Self {
            detection_probability: PerNode::new(10.0e-6, 7.1e-6),
            alpha: PerNode::both(0.25),
            background_hz: PerDetector::new(23.8, 22.0),
            double_excitation: PerNode::new(0.04, 0.1),
            phase_noise_std_deg: 45.3,
            dephasing: PerNode::new(0.02, 0.04),
            spectral_diffusion_fwhm_mhz: 13.0,
            mode_overlap: 0.95,
            window_ns: 15.0,
            reference_window_ns: 15.0,
            rabi_angle_deg: 150.0,
            ionization: PerNode::both(0.046),
            psb_efficiency: PerNode::both(0.0),
            decay_ns: 12.0,
            readout_fidelity: PerNode::new(0.9413, 0.9498),
        }
    }

    /// Near-term scenario: brighter emitters, improved conversion and
    /// local phase stabilization.
    pub fn near_term() -> Self {
        Self {
            detection_probability: PerNode::both(16.0 * 10e-6),
            alpha: PerNode::both(0.05),
            background_hz: PerDetector::new(5.0, 5.0),
            double_excitation: PerNode::both(0.04),
            phase_noise_std_deg: 15.0,
            dephasing: PerNode::new(0.02, 0.04),
            spectral_diffusion_fwhm_mhz: 13.0,
            mode_overlap: 0.95,
            window_ns: 15.0,
            reference_window_ns: 15.0,
            rabi_angle_deg: 150.0,
            ionization: PerNode::both(0.046),
            psb_efficiency: PerNode::both(0.1),
            decay_ns: 12.0,
            readout_fidelity: PerNode::new(0.9413, 0.9498),
        }
    }

    /// Future scenario on top of the near-term one.
    pub fn future() -> Self {
        Self {
            double_excitation: PerNode::both(0.01),
            dephasing: PerNode::both(0.01),
            mode_overlap: 0.99,
            ionization: PerNode::both(0.01),
            ..Self::near_term()
        }
    }

    pub fn with_window(&self, window_ns: f64) -> Self {
        Self { window_ns, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let probs: [(&'static str, f64); 17] = [
            ("detection_probability.delft", self.detection_probability.delft),
            ("detection_probability.the_hague", self.detection_probability.the_hague),
            ("alpha.delft", self.alpha.delft),
            ("alpha.the_hague", self.alpha.the_hague),
            ("double_excitation.delft", self.double_excitation.delft),
            ("double_excitation.the_hague", self.double_excitation.the_hague),
            ("dephasing.delft", self.dephasing.delft),
            ("dephasing.the_hague", self.dephasing.the_hague),
            ("mode_overlap", self.mode_overlap),
            ("ionization.delft", self.ionization.delft),
            ("ionization.the_hague", self.ionization.the_hague),
            ("psb_efficiency.delft", self.psb_efficiency.delft),
            ("psb_efficiency.the_hague", self.psb_efficiency.the_hague),
            ("readout_fidelity.delft", self.readout_fidelity.delft),
            ("readout_fidelity.the_hague", self.readout_fidelity.the_hague),
            ("detection_probability (scaled)", self.node_detection(0).max(self.node_detection(1))),
            ("noise click probability", self.noise_click_probability().iter().cloned().fold(0.0, f64::max)),
        ];
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(ModelError::OutOfRange { name, value });
            }
        }
        let positive: [(&'static str, f64); 3] = [
            ("window_ns", self.window_ns),
            ("reference_window_ns", self.reference_window_ns),
            ("decay_ns", self.decay_ns),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::OutOfRange { name, value });
            }
        }
        let non_negative: [(&'static str, f64); 5] = [
            ("background_hz.one", self.background_hz.one),
            ("background_hz.two", self.background_hz.two),
            ("phase_noise_std_deg", self.phase_noise_std_deg),
            ("spectral_diffusion_fwhm_mhz", self.spectral_diffusion_fwhm_mhz),
            ("rabi_angle_deg", self.rabi_angle_deg),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ModelError::OutOfRange { name, value });
            }
        }
        Ok(())
    }

    /// Midpoint detection probability of a bright-state emission from one
    /// node inside the configured window.
    pub fn node_detection(&self, node: usize) -> f64 {
        let base = self.detection_probability.as_array()[node];
        let window = window_signal_fraction(self.window_ns, self.decay_ns)
            / window_signal_fraction(self.reference_window_ns, self.decay_ns);
        base * window * excitation_probability(self.rabi_angle_deg) / excitation_probability(REFERENCE_RABI_ANGLE_DEG)
    }

    /// Background click probability per detector inside the window.
    pub fn noise_click_probability(&self) -> [f64; 2] {
        self.background_hz.as_array().map(|r| r * self.window_ns * 1e-9)
    }

    pub fn readout_model(&self) -> ReadoutModel {
        ReadoutModel {
            delft: NodeReadout::symmetric(self.readout_fidelity.delft),
            the_hague: NodeReadout::symmetric(self.readout_fidelity.the_hague),
        }
    }

    /// Coherence retained by the stated phase noise.
    pub fn phase_coherence(&self) -> f64 {
        let s = self.phase_noise_std_deg.to_radians();
        (-0.5 * s * s).exp()
    }

    /// Coherence retained under spectral diffusion within the window.
    pub fn spectral_coherence(&self) -> f64 {
        spectral_diffusion_coherence(self.spectral_diffusion_fwhm_mhz, self.window_ns, self.decay_ns)
    }

    /// Product of every real coherence factor.
    pub fn coherence_factor(&self) -> f64 {
        self.mode_overlap
            * self.spectral_coherence()
            * self.phase_coherence()
            * (1.0 - self.dephasing.delft)
            * (1.0 - self.dephasing.the_hague)
    }
}

/// Fraction of an exponential wavepacket inside `[0, window]`.
pub fn window_signal_fraction(window_ns: f64, decay_ns: f64) -> f64 {
    if window_ns <= 0.0 {
        return 0.0;
    }
    1.0 - (-window_ns / decay_ns).exp()
}

/// Optical excitation probability of a pulse with the given Rabi angle.
pub fn excitation_probability(rabi_angle_deg: f64) -> f64 {
    (0.5 * rabi_angle_deg.to_radians()).sin().powi(2)
}

/// Average of `exp(−σ²t²/2)` over the part of the wavepacket inside the
/// window, for a Gaussian relative detuning of the given FWHM.
pub fn spectral_diffusion_coherence(fwhm_mhz: f64, window_ns: f64, decay_ns: f64) -> f64 {
    if fwhm_mhz <= 0.0 || window_ns <= 0.0 {
        return 1.0;
    }
    let sigma = std::f64::consts::TAU * fwhm_mhz * 1e-3 / FWHM_PER_SIGMA; // rad/ns
    let n = 2000;
    let h = window_ns / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let t = i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let e = (-t / decay_ns).exp();
        num += w * e * (-0.5 * sigma * sigma * t * t).exp();
        den += w * e;
    }
    num / den
}

/// Per-node emitter description after averaging (or fixing) classical noise.
#[derive(Debug, Clone, Copy)]
struct Sources {
    ionized: [f64; 2],
    alpha: [f64; 2],
    eta: [f64; 2],
    early_photon: [f64; 2],
    /// Overlap of a bright node's environment with the vacuum; enters the
    /// coherence once per node.
    coherent_emission: [f64; 2],
    psb: [f64; 2],
}

/// Unnormalized heralded operator: level populations plus the single
/// `<01|ρ|10>` coherence, which is the only off-diagonal element produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeraldOperator {
    pub diagonal: [f64; 9],
    pub coherence: Complex64,
    pub ionized_levels: bool,
}

impl HeraldOperator {
    pub fn probability(&self) -> f64 {
        self.diagonal.iter().sum()
    }

    /// Unnormalized `<Ψ|ρ|Ψ>` for the given sign and phase.
    pub fn bell_weight(&self, sign: f64, theta: f64) -> f64 {
        0.5 * (self.diagonal[1] + self.diagonal[2]) + (self.coherence * Complex64::from_polar(sign, theta)).re
    }

    pub fn to_state(&self) -> Result<TwoQubitState, ModelError> {
        let p = self.probability();
        if p <= 0.0 {
            return Err(ModelError::NoHeralds);
        }
        let dim = if self.ionized_levels { 9 } else { 4 };
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = Complex64::new(self.diagonal[i] / p, 0.0);
        }
        m[(1, 2)] = self.coherence / p;
        m[(2, 1)] = self.coherence.conj() / p;
        Ok(TwoQubitState::from_matrix_unchecked(m).expect("dimension is 4 or 9"))
    }
}

fn level_weight(src: &Sources, node: usize, level: usize) -> f64 {
    let q = src.ionized[node];
    match level {
        0 => (1.0 - q) * src.alpha[node],
        1 => (1.0 - q) * (1.0 - src.alpha[node]),
        _ => q,
    }
}

/// Herald operator for one detector given per-node sources, background click
/// probabilities, two-photon (Hong-Ou-Mandel) overlap and the complex factor
/// multiplying the ideal coherence.
fn herald_operator(
    src: &Sources,
    noise: [f64; 2],
    hom_overlap: f64,
    detector: Detector,
    coherence_factor: Complex64,
) -> HeraldOperator {
    let k = detector.index();
    let nk = noise[k];
    let quiet = 1.0 - noise[1 - k];
    let veto_survival = |i: usize| 1.0 - src.early_photon[i] * src.psb[i];
    let lost = |i: usize| (1.0 - src.eta[i]) * (1.0 - src.psb[i]);

    let mut diagonal = [0.0; 9];
    for la in 0..3 {
        for lb in 0..3 {
            let w = level_weight(src, 0, la) * level_weight(src, 1, lb);
            if w == 0.0 {
                continue;
            }
            let click = match (la == 0, lb == 0) {
                (false, false) => nk * quiet,
                (true, false) => veto_survival(0) * (src.eta[0] * 0.5 + lost(0) * nk) * quiet,
                (false, true) => veto_survival(1) * (src.eta[1] * 0.5 + lost(1) * nk) * quiet,
                (true, true) => {
                    let (ea, eb) = (src.eta[0], src.eta[1]);
                    veto_survival(0)
                        * veto_survival(1)
                        * (ea * eb * 0.25 * (1.0 + hom_overlap)
                            + 0.5 * ea * lost(1)
                            + 0.5 * eb * lost(0)
                            + lost(0) * lost(1) * nk)
                        * quiet
                }
            };
            let level = |l: usize| match l {
                0 => Level::Zero,
                1 => Level::One,
                _ => Level::Ionized,
            };
            diagonal[basis_index(level(la), level(lb))] = w * click;
        }
    }

    let amplitude =
        (level_weight(src, 0, 0) * level_weight(src, 1, 1) * level_weight(src, 0, 1) * level_weight(src, 1, 0)).sqrt()
            * 0.5
            * (src.eta[0] * src.eta[1]).sqrt()
            * src.coherent_emission[0]
            * src.coherent_emission[1]
            * quiet;
    let sign = detector.heralded_sign().value();
    HeraldOperator {
        diagonal,
        coherence: coherence_factor * amplitude * sign,
        ionized_levels: src.ionized.iter().any(|&q| q > 0.0),
    }
}

fn averaged_sources(p: &LinkParameters, psb_filtering: bool) -> Sources {
    Sources {
        ionized: p.ionization.as_array(),
        alpha: p.alpha.as_array(),
        eta: [p.node_detection(0), p.node_detection(1)],
        early_photon: p.double_excitation.as_array(),
        coherent_emission: p.double_excitation.as_array().map(|d| (1.0 - d).sqrt()),
        psb: if psb_filtering { p.psb_efficiency.as_array() } else { [0.0; 2] },
    }
}

fn check_cutoff(p: &LinkParameters) -> Result<(), ModelError> {
    let noise = p.noise_click_probability();
    let any_noise = 1.0 - (1.0 - noise[0]) * (1.0 - noise[1]);
    let w = p.alpha.delft * p.alpha.the_hague * p.node_detection(0) * p.node_detection(1) * any_noise;
    if w > CUTOFF_WEIGHT {
        return Err(ModelError::CutoffViolation(w));
    }
    Ok(())
}

/// Signal and background click probabilities within the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickProbabilities {
    /// Per node: `α · p_det` inside the window, summed over both detectors.
    pub signal: [f64; 2],
    /// Per detector: background rate times window.
    pub noise: [f64; 2],
    /// Per detector: single-click probability for non-resolving detectors
    /// behind a balanced beam splitter.
    pub total: [f64; 2],
}

impl ClickProbabilities {
    pub fn signal_total(&self) -> f64 {
        self.signal.iter().sum()
    }

    pub fn noise_total(&self) -> f64 {
        self.noise.iter().sum()
    }
}

pub fn detection_probabilities(p: &LinkParameters) -> ClickProbabilities {
    let signal = [p.alpha.delft * p.node_detection(0), p.alpha.the_hague * p.node_detection(1)];
    let noise = p.noise_click_probability();
    let photon_free = (1.0 - 0.5 * signal[0]) * (1.0 - 0.5 * signal[1]);
    let total = noise.map(|n| 1.0 - photon_free * (1.0 - n));
    ClickProbabilities { signal, noise, total }
}

/// Signal-to-noise ratio; unbounded without background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    Unbounded,
}

impl Snr {
    pub fn value(self) -> f64 {
        match self {
            Snr::Finite(v) => v,
            Snr::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, Snr::Unbounded)
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Finite(v) => write!(f, "{v}"),
            Snr::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Finite(v) => s.serialize_f64(*v),
            Snr::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

pub fn snr(p: &LinkParameters) -> Snr {
    let c = detection_probabilities(p);
    let noise = c.noise_total();
    if noise <= 0.0 {
        Snr::Unbounded
    } else {
        Snr::Finite(c.signal_total() / noise)
    }
}

/// Heralded state and probability for one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeraldBranch {
    pub detector: Detector,
    pub probability: f64,
    pub state: TwoQubitState,
    /// Fidelity to the Bell state this detector heralds, at the model phase.
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeraldedOutcome {
    pub branches: [HeraldBranch; 2],
    pub success_probability: f64,
    pub snr: Snr,
}

impl HeraldedOutcome {
    /// Fidelity averaged over the two detector branches.
    pub fn mean_fidelity(&self) -> f64 {
        0.5 * (self.branches[0].fidelity + self.branches[1].fidelity)
    }

    pub fn branch(&self, d: Detector) -> &HeraldBranch {
        &self.branches[d.index()]
    }
}

/// Herald operators for both detectors, without averaging into states.
pub fn herald_operators(
    p: &LinkParameters,
    theta: f64,
    psb_filtering: bool,
) -> Result<[HeraldOperator; 2], ModelError> {
    p.validate()?;
    check_cutoff(p)?;
    let src = averaged_sources(p, psb_filtering);
    let factor = Complex64::from_polar(p.coherence_factor(), -theta);
    let hom = p.mode_overlap * p.mode_overlap;
    let noise = p.noise_click_probability();
    Ok(Detector::BOTH.map(|d| herald_operator(&src, noise, hom, d, factor)))
}

fn outcome_from(p: &LinkParameters, theta: f64, psb_filtering: bool) -> Result<HeraldedOutcome, ModelError> {
    let ops = herald_operators(p, theta, psb_filtering)?;
    let mut branches = Vec::with_capacity(2);
    for (d, op) in Detector::BOTH.iter().zip(ops.iter()) {
        let state = op.to_state()?;
        let fidelity = op.bell_weight(d.heralded_sign().value(), theta) / op.probability();
        branches.push(HeraldBranch { detector: *d, probability: op.probability(), state, fidelity });
    }
    let success_probability = ops.iter().map(HeraldOperator::probability).sum();
    let branches: [HeraldBranch; 2] = branches.try_into().expect("two detectors");
    Ok(HeraldedOutcome { branches, success_probability, snr: snr(p) })
}

/// State heralded by a single click, without phonon-sideband filtering.
pub fn heralded_state(p: &LinkParameters, theta: f64) -> Result<HeraldedOutcome, ModelError> {
    outcome_from(p, theta, false)
}

/// Heralded state after discarding events flagged by a local
/// phonon-sideband photon at the configured collection efficiency.
pub fn psb_false_herald_filter(p: &LinkParameters, theta: f64) -> Result<HeraldedOutcome, ModelError> {
    outcome_from(p, theta, true)
}

/// The model used for every tabulated comparison: PSB filtering as configured.
pub fn simulate(p: &LinkParameters) -> Result<HeraldedOutcome, ModelError> {
    psb_false_herald_filter(p, 0.0)
}

/// Imperfection groups of the error budget, matching the merged table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetGroup {
    /// Detection probability, α and background counts.
    SignalToNoise,
    DoubleExcitation,
    PhaseNoise,
    Dephasing,
    /// Spectral diffusion together with the static beam-splitter overlap.
    SpectralDiffusion,
    Ionization,
}

impl BudgetGroup {
    pub const ALL: [BudgetGroup; 6] = [
        BudgetGroup::SignalToNoise,
        BudgetGroup::DoubleExcitation,
        BudgetGroup::PhaseNoise,
        BudgetGroup::Dephasing,
        BudgetGroup::SpectralDiffusion,
        BudgetGroup::Ionization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BudgetGroup::SignalToNoise => "detection_probability+alpha+background",
            BudgetGroup::DoubleExcitation => "double_excitation",
            BudgetGroup::PhaseNoise => "phase_noise_std",
            BudgetGroup::Dephasing => "dephasing",
            BudgetGroup::SpectralDiffusion => "spectral_diffusion+mode_overlap",
            BudgetGroup::Ionization => "ionization",
        }
    }

    fn describe(self, p: &LinkParameters) -> String {
        let pair = |x: PerNode| format!("{} {}", x.delft, x.the_hague);
        match self {
            BudgetGroup::SignalToNoise => format!(
                "p_det {} alpha {} background_hz {} {}",
                pair(p.detection_probability),
                pair(p.alpha),
                p.background_hz.one,
                p.background_hz.two
            ),
            BudgetGroup::DoubleExcitation => pair(p.double_excitation),
            BudgetGroup::PhaseNoise => format!("{}", p.phase_noise_std_deg),
            BudgetGroup::Dephasing => pair(p.dephasing),
            BudgetGroup::SpectralDiffusion => {
                format!("fwhm_mhz {} overlap {}", p.spectral_diffusion_fwhm_mhz, p.mode_overlap)
            }
            BudgetGroup::Ionization => pair(p.ionization),
        }
    }

    /// Copies this group's parameters from `from` into `into`.
    fn enable(self, into: &mut LinkParameters, from: &LinkParameters) {
        match self {
            BudgetGroup::SignalToNoise => {
                into.detection_probability = from.detection_probability;
                into.alpha = from.alpha;
                into.background_hz = from.background_hz;
            }
            BudgetGroup::DoubleExcitation => into.double_excitation = from.double_excitation,
            BudgetGroup::PhaseNoise => into.phase_noise_std_deg = from.phase_noise_std_deg,
            BudgetGroup::Dephasing => into.dephasing = from.dephasing,
            BudgetGroup::SpectralDiffusion => {
                into.spectral_diffusion_fwhm_mhz = from.spectral_diffusion_fwhm_mhz;
                into.mode_overlap = from.mode_overlap;
            }
            BudgetGroup::Ionization => into.ionization = from.ionization,
        }
    }
}

/// The same link with every imperfection at its ideal value, balanced
/// detection and a vanishing bright population.
pub fn ideal_parameters(p: &LinkParameters) -> LinkParameters {
    LinkParameters {
        detection_probability: PerNode::both(p.detection_probability.mean()),
        alpha: PerNode::both(IDEAL_ALPHA),
        background_hz: PerDetector::new(0.0, 0.0),
        double_excitation: PerNode::both(0.0),
        phase_noise_std_deg: 0.0,
        dephasing: PerNode::both(0.0),
        spectral_diffusion_fwhm_mhz: 0.0,
        mode_overlap: 1.0,
        ionization: PerNode::both(0.0),
        ..p.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub parameter: String,
    pub value: String,
    pub infidelity_contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBudget {
    pub rows: Vec<BudgetRow>,
    /// Infidelity with every imperfection on.
    pub total_infidelity: f64,
    /// Fidelity per detector with every imperfection on.
    pub fidelity: [f64; 2],
}

impl ErrorBudget {
    pub fn contribution(&self, group: BudgetGroup) -> f64 {
        self.rows.iter().find(|r| r.parameter == group.name()).map(|r| r.infidelity_contribution).unwrap_or(f64::NAN)
    }

    /// CSV with columns `parameter,value,infidelity_contribution`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,value,infidelity_contribution\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.parameter, r.value, r.infidelity_contribution));
        }
        out.push_str(&format!("total,all,{}\n", self.total_infidelity));
        out.push_str(&format!("fidelity_detector_1,all,{}\n", self.fidelity[0]));
        out.push_str(&format!("fidelity_detector_2,all,{}\n", self.fidelity[1]));
        out
    }
}

/// Infidelity from each imperfection group acting alone, plus the total.
pub fn error_budget(p: &LinkParameters) -> Result<ErrorBudget, ModelError> {
    let full = simulate(p)?;
    let ideal = ideal_parameters(p);
    let mut rows = Vec::new();
    for g in BudgetGroup::ALL {
        let mut q = ideal.clone();
        g.enable(&mut q, p);
        let f = simulate(&q)?.mean_fidelity();
        rows.push(BudgetRow {
            parameter: g.name().to_string(),
            value: g.describe(p),
            infidelity_contribution: 1.0 - f,
        });
    }
    Ok(ErrorBudget {
        rows,
        total_infidelity: 1.0 - full.mean_fidelity(),
        fidelity: [full.branches[0].fidelity, full.branches[1].fidelity],
    })
}

/// One row of a detection-window sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPoint {
    pub window_ns: f64,
    pub fidelity: f64,
    pub fidelity_err: f64,
    pub success_probability: f64,
    pub rate_hz: f64,
    pub snr: Snr,
    /// Heralds expected over the measurement time.
    pub expected_events: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSweepResult {
    pub points: Vec<WindowPoint>,
}

impl WindowSweepResult {
    /// CSV with columns `window_ns,fidelity,fidelity_err,rate_hz,snr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_ns,fidelity,fidelity_err,rate_hz,snr\n");
        for pt in &self.points {
            out.push_str(&format!("{},{},{},{},{}\n", pt.window_ns, pt.fidelity, pt.fidelity_err, pt.rate_hz, pt.snr));
        }
        out
    }
}

/// Attempt rate and integration time behind a sweep's rates and error bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub attempt_rate_hz: f64,
    pub measurement_time_s: f64,
}

/// Fidelity, success probability, rate and SNR per window.
pub fn window_sweep(
    p: &LinkParameters,
    windows: &[f64],
    settings: SweepSettings,
) -> Result<WindowSweepResult, ModelError> {
    let mut points = Vec::with_capacity(windows.len());
    for &w in windows {
        let q = p.with_window(w);
        let out = simulate(&q)?;
        let rate = out.success_probability * settings.attempt_rate_hz;
        let events = rate * settings.measurement_time_s;
        let fidelity = out.mean_fidelity();
        points.push(WindowPoint {
            window_ns: w,
            fidelity,
            fidelity_err: fidelity_error_estimate(&out, events),
            success_probability: out.success_probability,
            rate_hz: rate,
            snr: out.snr,
            expected_events: events,
        });
    }
    Ok(WindowSweepResult { points })
}

/// Binomial error of a correlator-based fidelity with `events` heralds split
/// evenly over the three bases.
fn fidelity_error_estimate(out: &HeraldedOutcome, events: f64) -> f64 {
    use crate::quantum::{correlators, fidelity_standard_error};
    let per_basis = events / 3.0;
    let errs: Vec<f64> =
        out.branches.iter().map(|b| fidelity_standard_error(&correlators(&b.state), [per_basis / 2.0; 3])).collect();
    0.5 * (errs[0] * errs[0] + errs[1] * errs[1]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioFidelity {
    pub scenario: String,
    pub fidelity: f64,
    pub success_probability: f64,
}

/// Fidelities of the near-term and future parameter sets.
pub fn improvement_scenarios() -> Result<Vec<ScenarioFidelity>, ModelError> {
    [("near_term", LinkParameters::near_term()), ("future", LinkParameters::future())]
        .into_iter()
        .map(|(name, p)| {
            let out = simulate(&p)?;
            Ok(ScenarioFidelity {
                scenario: name.to_string(),
                fidelity: out.mean_fidelity(),
                success_probability: out.success_probability,
            })
        })
        .collect()
}

/// Monte-Carlo estimate for one detector branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchEstimate {
    pub fidelity: f64,
    pub fidelity_err: f64,
    pub probability: f64,
    pub probability_err: f64,
}

/// Samples the classical noise (phase, relative detuning and click time,
/// distinguishability, dephasing flips, double excitation, ionization) and
/// averages the conditional herald operator. Enumeration with closed-form
/// averages is the reference this must agree with.
pub fn monte_carlo_heralded<R: Rng + ?Sized>(
    p: &LinkParameters,
    theta: f64,
    psb_filtering: bool,
    samples: usize,
    rng: &mut R,
) -> Result<[BranchEstimate; 2], ModelError> {
    p.validate()?;
    check_cutoff(p)?;
    let base = averaged_sources(p, psb_filtering);
    let noise = p.noise_click_probability();
    let hom = p.mode_overlap * p.mode_overlap;
    let phase = Normal::new(0.0, p.phase_noise_std_deg.to_radians()).expect("std is non-negative");
    let detuning_sigma = std::f64::consts::TAU * p.spectral_diffusion_fwhm_mhz * 1e-3 / FWHM_PER_SIGMA;
    let detuning = Normal::new(0.0, detuning_sigma).expect("std is non-negative");
    let emission_cdf = window_signal_fraction(p.window_ns, p.decay_ns);

    const BATCHES: usize = 40;
    let per_batch = samples.div_ceil(BATCHES).max(1);
    let mut batch_num = vec![[0.0f64; 2]; BATCHES];
    let mut batch_den = vec![[0.0f64; 2]; BATCHES];

    for b in 0..BATCHES {
        for _ in 0..per_batch {
            let mut src = base;
            for i in 0..2 {
                src.ionized[i] = f64::from(u8::from(rng.random::<f64>() < base.ionized[i]));
                src.coherent_emission[i] = f64::from(u8::from(rng.random::<f64>() < base.coherent_emission[i]));
            }
            let indistinguishable = rng.random::<f64>() < p.mode_overlap;
            let u: f64 = rng.random();
            let t = -p.decay_ns * (1.0 - u * emission_cdf).ln();
            let phi = phase.sample(rng) + detuning.sample(rng) * t;
            let mut sign = 1.0;
            for i in 0..2 {
                if rng.random::<f64>() < 0.5 * p.dephasing.as_array()[i] {
                    sign = -sign;
                }
            }
            let magnitude = if indistinguishable { sign } else { 0.0 };
            let factor = Complex64::from_polar(magnitude, -(theta + phi));
            for d in Detector::BOTH {
                let op = herald_operator(&src, noise, hom, d, factor);
                batch_num[b][d.index()] += op.bell_weight(d.heralded_sign().value(), theta);
                batch_den[b][d.index()] += op.probability();
            }
        }
    }

    let mut out = [BranchEstimate { fidelity: 0.0, fidelity_err: 0.0, probability: 0.0, probability_err: 0.0 }; 2];
    for d in 0..2 {
        let num: f64 = batch_num.iter().map(|x| x[d]).sum();
        let den: f64 = batch_den.iter().map(|x| x[d]).sum();
        if den <= 0.0 {
            return Err(ModelError::NoHeralds);
        }
        let f = num / den;
        let fs: Vec<f64> = (0..BATCHES).map(|b| batch_num[b][d] / batch_den[b][d]).collect();
        let ps: Vec<f64> = (0..BATCHES).map(|b| batch_den[b][d] / per_batch as f64).collect();
        let p_mean = den / (BATCHES * per_batch) as f64;
        out[d] = BranchEstimate {
            fidelity: f,
            fidelity_err: standard_error(&fs),
            probability: p_mean,
            probability_err: standard_error(&ps),
        };
    }
    Ok(out)
}

fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}
