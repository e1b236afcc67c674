//! Discrete-event simulation of the two-node link: CR-check handshake,
//! heartbeat-aligned attempts, midpoint heralding and delivery.
//!
//! Timestamps are integer picoseconds. Failed attempts are not simulated one
//! by one; the gap to the next success is drawn from the geometric
//! distribution and each block logs its attempt count.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantum::{
    apply_detector_feedforward, apply_readout, correlator_standard_error, fidelity_from_correlators, unfold_readout,
    BellSign, CorrelatorTriple, Detector, OutcomeDistribution, Pauli, ReadoutModel, TwoQubitState,
};
use crate::seed::SeedTree;
use crate::singleclick::{herald_operators, window_signal_fraction, LinkParameters, ModelError, PerNode};

pub const PS_PER_US: f64 = 1e6;
/// Largest tolerated arrival-time difference at the beam splitter.
pub const ALIGNMENT_BUDGET_PS: i64 = 50;
/// Length of the photon slot inside a heartbeat.
pub const PHOTON_SLOT_PS: u64 = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("`{name}` must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("`{name}` must be finite, got {value}")]
    NotFinite { name: &'static str, value: f64 },
    #[error("`{name}` must lie in [0, 1], got {value}")]
    NotProbability { name: &'static str, value: f64 },
    #[error("photon arrivals misaligned by {residual_ps} ps (budget {ALIGNMENT_BUDGET_PS} ps)")]
    Misalignment { residual_ps: i64 },
    #[error("hold of {hold} heartbeats cannot absorb a {delta_ps} ps time-of-flight difference")]
    InsufficientHold { hold: u32, delta_ps: u64 },
    #[error("acceptance window [{offset_ps}, {offset_ps} + {length_ps}) ps does not fit the photon slot")]
    WindowOutsideSlot { offset_ps: u64, length_ps: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn positive(name: &'static str, value: f64) -> Result<(), LinkError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(LinkError::NotPositive { name, value })
    }
}

fn probability(name: &'static str, value: f64) -> Result<(), LinkError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(LinkError::NotProbability { name, value })
    }
}

fn us_to_ps(us: f64) -> u64 {
    (us * PS_PER_US).round() as u64
}

fn ceil_to(t: u64, step: u64) -> u64 {
    t.div_ceil(step) * step
}

/// Fiber plant and clocking shared by both nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkTopology {
    /// One-way node-to-midpoint time of flight.
    pub time_of_flight_us: PerNode,
    pub loss_db: PerNode,
    pub heartbeat_us: f64,
    pub clock_jitter_ps: f64,
}

impl Default for LinkTopology {
    fn default() -> Self {
        Self {
            time_of_flight_us: PerNode::new(72.655, 51.58),
            loss_db: PerNode::new(13.9, 13.1),
            heartbeat_us: 10.0,
            clock_jitter_ps: 5.0,
        }
    }
}

impl LinkTopology {
    pub fn validate(&self) -> Result<(), LinkError> {
        positive("time_of_flight_us.delft", self.time_of_flight_us.delft)?;
        positive("time_of_flight_us.the_hague", self.time_of_flight_us.the_hague)?;
        positive("heartbeat_us", self.heartbeat_us)?;
        if !(self.clock_jitter_ps >= 0.0 && self.clock_jitter_ps.is_finite()) {
            return Err(LinkError::NotPositive { name: "clock_jitter_ps", value: self.clock_jitter_ps });
        }
        Ok(())
    }

    pub fn heartbeat_ps(&self) -> u64 {
        us_to_ps(self.heartbeat_us)
    }

    pub fn time_of_flight_ps(&self) -> [u64; 2] {
        self.time_of_flight_us.as_array().map(us_to_ps)
    }

    /// Same plant with both fibers scaled in length.
    pub fn with_scaled_fibers(&self, factor: f64) -> Self {
        let t = self.time_of_flight_us;
        Self { time_of_flight_us: PerNode::new(t.delft * factor, t.the_hague * factor), ..self.clone() }
    }
}

/// Timing of the node sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSchedule {
    /// Duration of one CR-check try.
    pub cr_check_us: f64,
    pub cr_pass_probability: f64,
    pub stabilization_heartbeats: u32,
    pub rounds_per_block: u32,
    /// Local-phase pulses ride along every n-th round inside its heartbeat.
    pub local_phase_refresh_every: u32,
    /// Lower bound on the heralded attempt period.
    pub heralded_attempt_period_us: f64,
    /// Echo pulse time after spin-photon entanglement.
    pub echo_us: PerNode,
    pub max_heralded_attempts: u32,
    /// Heartbeats the shorter arm holds its sequence; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_heartbeats: Option<u32>,
    /// Slack between the expected herald arrival and the node's poll.
    pub polling_margin_us: f64,
    /// Basis selection to end of readout.
    pub readout_us: f64,
}

impl Default for NodeSchedule {
    fn default() -> Self {
        Self {
            cr_check_us: 100.0,
            cr_pass_probability: 0.0469,
            stabilization_heartbeats: 20,
            rounds_per_block: 540,
            local_phase_refresh_every: 7,
            heralded_attempt_period_us: 200.0,
            echo_us: PerNode::new(82.0, 68.0),
            max_heralded_attempts: 228,
            hold_heartbeats: None,
            polling_margin_us: 1.0,
            readout_us: 5.0,
        }
    }
}

impl NodeSchedule {
    pub fn validate(&self) -> Result<(), LinkError> {
        positive("cr_check_us", self.cr_check_us)?;
        probability("cr_pass_probability", self.cr_pass_probability)?;
        positive("cr_pass_probability", self.cr_pass_probability)?;
        positive("rounds_per_block", f64::from(self.rounds_per_block))?;
        positive("local_phase_refresh_every", f64::from(self.local_phase_refresh_every))?;
        positive("heralded_attempt_period_us", self.heralded_attempt_period_us)?;
        positive("echo_us.delft", self.echo_us.delft)?;
        positive("echo_us.the_hague", self.echo_us.the_hague)?;
        positive("max_heralded_attempts", f64::from(self.max_heralded_attempts))?;
        positive("polling_margin_us", self.polling_margin_us)?;
        positive("readout_us", self.readout_us)
    }

    /// Mean number of tries until both nodes have passed.
    pub fn expected_cr_tries(&self) -> f64 {
        let q = self.cr_pass_probability;
        2.0 / q - 1.0 / (1.0 - (1.0 - q).powi(2))
    }
}

/// Spin coherence under the echo: Gaussian revivals of the echo time at
/// multiples of the Larmor period, under a stretched-exponential decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceModel {
    pub larmor_period_us: PerNode,
    pub revival_width_us: PerNode,
    pub decay_us: PerNode,
    pub decay_exponent: f64,
}

impl Default for CoherenceModel {
    fn default() -> Self {
        Self {
            larmor_period_us: PerNode::new(20.5, 17.0),
            revival_width_us: PerNode::both(1.0),
            decay_us: PerNode::new(695.96, 426.06),
            decay_exponent: 3.0,
        }
    }
}

impl CoherenceModel {
    pub fn validate(&self) -> Result<(), LinkError> {
        for (name, v) in [
            ("larmor_period_us.delft", self.larmor_period_us.delft),
            ("larmor_period_us.the_hague", self.larmor_period_us.the_hague),
            ("revival_width_us.delft", self.revival_width_us.delft),
            ("revival_width_us.the_hague", self.revival_width_us.the_hague),
            ("decay_us.delft", self.decay_us.delft),
            ("decay_us.the_hague", self.decay_us.the_hague),
            ("decay_exponent", self.decay_exponent),
        ] {
            positive(name, v)?;
        }
        Ok(())
    }
}

/// Contrast retained after a total free evolution `wait_us` with the echo at
/// its midpoint.
pub fn coherence_envelope(model: &CoherenceModel, node: usize, wait_us: f64) -> f64 {
    let wait = wait_us.max(0.0);
    let period = model.larmor_period_us.as_array()[node];
    let width = model.revival_width_us.as_array()[node];
    let decay = model.decay_us.as_array()[node];
    let tau = 0.5 * wait;
    let offset = tau - (tau / period).round() * period;
    let revival = (-0.5 * (offset / width).powi(2)).exp();
    revival * (-(wait / decay).powf(model.decay_exponent)).exp()
}

/// Calibrated one-way times of flight used to set the emission offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkewCalibration {
    pub time_of_flight_ps: [u64; 2],
}

impl SkewCalibration {
    pub fn from_topology(t: &LinkTopology) -> Self {
        Self { time_of_flight_ps: t.time_of_flight_ps() }
    }
}

/// Emission offsets and herald routing that make both photons meet at the
/// beam splitter and both herald pulses land on the same heartbeat phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionPlan {
    /// Emission time after the attempt's heartbeat boundary.
    pub emission_offset_ps: [u64; 2],
    pub hold_heartbeats: [u32; 2],
    /// FPGA output delay per arm.
    pub herald_delay_ps: [u64; 2],
    /// Photon arrival at the midpoint after the attempt boundary.
    pub midpoint_arrival_ps: u64,
    /// Arrival of the Delft photon minus arrival of The Hague photon.
    pub residual_ps: i64,
}

/// Aligns emissions with the calibrated times of flight and checks the
/// actual plant against the alignment budget.
pub fn align_time_of_flight(
    topology: &LinkTopology,
    calibration: &SkewCalibration,
    hold: Option<u32>,
) -> Result<EmissionPlan, LinkError> {
    topology.validate()?;
    let hb = topology.heartbeat_ps();
    let cal = calibration.time_of_flight_ps;
    let (long, short) = if cal[0] >= cal[1] { (0, 1) } else { (1, 0) };
    let delta = cal[long] - cal[short];
    let hold_short = hold.unwrap_or_else(|| delta.div_ceil(hb) as u32);
    let held = u64::from(hold_short) * hb;
    if held < delta {
        return Err(LinkError::InsufficientHold { hold: hold_short, delta_ps: delta });
    }
    let mut offset = [0u64; 2];
    offset[short] = held;
    offset[long] = held - delta;
    let mut holds = [0u32; 2];
    holds[short] = hold_short;
    let mut delay = [0u64; 2];
    delay[short] = delta % hb;

    let actual = topology.time_of_flight_ps();
    let arrival = [offset[0] + actual[0], offset[1] + actual[1]];
    let residual = arrival[0] as i64 - arrival[1] as i64;
    if residual.abs() > ALIGNMENT_BUDGET_PS {
        return Err(LinkError::Misalignment { residual_ps: residual });
    }
    Ok(EmissionPlan {
        emission_offset_ps: offset,
        hold_heartbeats: holds,
        herald_delay_ps: delay,
        midpoint_arrival_ps: offset[long] + cal[long],
        residual_ps: residual,
    })
}

/// Detector click at the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub time_ps: u64,
    pub detector: Detector,
}

/// Accepted click interval relative to each heartbeat boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceWindow {
    pub offset_ps: u64,
    pub length_ps: u64,
}

/// One FPGA decision; the detector of a dual click follows fixed priority
/// (detector 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeraldDecision {
    pub heartbeat: u64,
    pub time_ps: u64,
    pub detector: Detector,
    pub dual_click: bool,
}

/// Turns clicks into herald decisions, at most one per heartbeat. Clicks
/// before the first boundary or outside the window are ignored.
pub fn fpga_heralder(
    clicks: &[Click],
    window: AcceptanceWindow,
    heartbeat_ps: u64,
    heartbeat_phase_ps: u64,
) -> Result<Vec<HeraldDecision>, LinkError> {
    if heartbeat_ps == 0 {
        return Err(LinkError::NotPositive { name: "heartbeat_ps", value: 0.0 });
    }
    if window.length_ps == 0 || window.length_ps > PHOTON_SLOT_PS || window.offset_ps + window.length_ps > heartbeat_ps
    {
        return Err(LinkError::WindowOutsideSlot { offset_ps: window.offset_ps, length_ps: window.length_ps });
    }
    let mut per_heartbeat: BTreeMap<u64, HeraldDecision> = BTreeMap::new();
    for c in clicks {
        let Some(since) = c.time_ps.checked_sub(heartbeat_phase_ps) else { continue };
        let (hb, rel) = (since / heartbeat_ps, since % heartbeat_ps);
        if rel < window.offset_ps || rel >= window.offset_ps + window.length_ps {
            continue;
        }
        per_heartbeat
            .entry(hb)
            .and_modify(|d| {
                if d.detector != c.detector {
                    d.dual_click = true;
                    d.detector = Detector::One;
                }
                d.time_ps = d.time_ps.min(c.time_ps);
            })
            .or_insert(HeraldDecision { heartbeat: hb, time_ps: c.time_ps, detector: c.detector, dual_click: false });
    }
    Ok(per_heartbeat.into_values().collect())
}

/// Herald pulse arrival at each node for a decision made at `decision_ps`.
pub fn herald_arrivals(decision_ps: u64, plan: &EmissionPlan, time_of_flight_ps: [u64; 2]) -> [u64; 2] {
    [0, 1].map(|n| decision_ps + plan.herald_delay_ps[n] + time_of_flight_ps[n])
}

/// Heralded-mode timing derived from the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeraldedTiming {
    pub period_ps: u64,
    /// Echo time actually used; the configured one or the first Larmor
    /// revival that leaves room for the herald.
    pub echo_ps: [u64; 2],
    /// Poll time after the attempt boundary.
    pub poll_ps: [u64; 2],
    /// Basis selection after the attempt boundary.
    pub basis_selection_ps: [u64; 2],
    /// Dephasing probability beyond the nominal echo.
    pub extra_dephasing: [f64; 2],
}

pub fn heralded_timing(
    topology: &LinkTopology,
    schedule: &NodeSchedule,
    coherence: &CoherenceModel,
    plan: &EmissionPlan,
    calibration: &SkewCalibration,
) -> HeraldedTiming {
    let hb = topology.heartbeat_ps();
    let margin = us_to_ps(schedule.polling_margin_us);
    let mut echo = [0u64; 2];
    let mut poll = [0u64; 2];
    let mut select = [0u64; 2];
    let mut extra = [0.0; 2];
    for n in 0..2 {
        let off = plan.emission_offset_ps[n];
        poll[n] = off + 2 * calibration.time_of_flight_ps[n] + plan.herald_delay_ps[n] + margin;
        let nominal = us_to_ps(schedule.echo_us.as_array()[n]);
        let larmor = us_to_ps(coherence.larmor_period_us.as_array()[n]).max(1);
        let mut tau = nominal;
        while off + 2 * tau < poll[n] {
            tau += larmor;
        }
        echo[n] = tau;
        select[n] = off + 2 * tau;
        let ratio = coherence_envelope(coherence, n, 2.0 * tau as f64 / PS_PER_US)
            / coherence_envelope(coherence, n, 2.0 * nominal as f64 / PS_PER_US);
        extra[n] = (1.0 - ratio).clamp(0.0, 1.0);
    }
    let end = select[0].max(select[1]) + us_to_ps(schedule.readout_us);
    let period = us_to_ps(schedule.heralded_attempt_period_us).max(ceil_to(end, hb));
    HeraldedTiming {
        period_ps: period,
        echo_ps: echo,
        poll_ps: poll,
        basis_selection_ps: select,
        extra_dephasing: extra,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entity {
    Delft,
    TheHague,
    Midpoint,
}

impl Entity {
    pub fn node(n: usize) -> Self {
        if n == 0 {
            Entity::Delft
        } else {
            Entity::TheHague
        }
    }

    pub fn node_index(self) -> Option<usize> {
        match self {
            Entity::Delft => Some(0),
            Entity::TheHague => Some(1),
            Entity::Midpoint => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PostSelected,
    Heralded,
}

/// Logged event payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    CrCheckPassed {
        block: u64,
        tries: u64,
    },
    BlockStart {
        block: u64,
    },
    Emission {
        attempt: u64,
    },
    Herald {
        attempt: u64,
        detector: Detector,
        dual_click: bool,
    },
    HeraldArrival {
        attempt: u64,
        detector: Detector,
        poll_ps: u64,
    },
    ProtocolFault {
        attempt: u64,
        late_by_ps: u64,
    },
    Delivered {
        attempt: u64,
        detector: Detector,
        feed_forward: bool,
        basis: Pauli,
        /// Per node, 0 for the +1 eigenvalue.
        outcome: [u8; 2],
        /// Fidelity of the delivered state to its target Bell state.
        fidelity: f64,
    },
    BlockEnd {
        block: u64,
        attempts: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_ps: u64,
    pub entity: Entity,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Newline-delimited JSON, one event per line.
pub fn to_ndjson(log: &[Event]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_ndjson(text: &str) -> Result<Vec<Event>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Everything the simulator needs besides mode, duration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSetup {
    pub topology: LinkTopology,
    pub schedule: NodeSchedule,
    pub physics: LinkParameters,
    pub coherence: CoherenceModel,
}

impl LinkSetup {
    pub fn new(physics: LinkParameters) -> Self {
        Self {
            topology: LinkTopology::default(),
            schedule: NodeSchedule::default(),
            physics,
            coherence: CoherenceModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        self.topology.validate()?;
        self.schedule.validate()?;
        self.coherence.validate()?;
        self.physics.validate()?;
        Ok(())
    }

    pub fn plan(&self) -> Result<EmissionPlan, LinkError> {
        align_time_of_flight(
            &self.topology,
            &SkewCalibration::from_topology(&self.topology),
            self.schedule.hold_heartbeats,
        )
    }

    pub fn heralded_timing(&self) -> Result<HeraldedTiming, LinkError> {
        let plan = self.plan()?;
        Ok(heralded_timing(
            &self.topology,
            &self.schedule,
            &self.coherence,
            &plan,
            &SkewCalibration::from_topology(&self.topology),
        ))
    }

    /// Classical latency of the readiness exchange between the nodes.
    fn handshake_ps(&self) -> u64 {
        self.topology.time_of_flight_ps().iter().sum()
    }

    pub fn attempt_period_ps(&self, mode: Mode) -> Result<u64, LinkError> {
        Ok(match mode {
            Mode::PostSelected => self.topology.heartbeat_ps(),
            Mode::Heralded => self.heralded_timing()?.period_ps,
        })
    }

    /// Mean fixed cost of a block before the first attempt.
    fn expected_overhead_s(&self) -> f64 {
        let hb = self.topology.heartbeat_us * 1e-6;
        self.schedule.expected_cr_tries() * self.schedule.cr_check_us * 1e-6
            + self.handshake_ps() as f64 * 1e-12
            + 0.5 * hb
            + f64::from(self.schedule.stabilization_heartbeats) * hb
    }

    /// Attempts per second of wall-clock time, CR checks and stabilization
    /// included, for a given per-attempt success probability.
    pub fn effective_attempt_rate_hz(&self, mode: Mode, success_probability: f64) -> Result<f64, LinkError> {
        let period = self.attempt_period_ps(mode)? as f64 * 1e-12;
        let attempts = match mode {
            Mode::PostSelected => f64::from(self.schedule.rounds_per_block),
            Mode::Heralded => {
                let max = f64::from(self.schedule.max_heralded_attempts);
                if success_probability <= 0.0 {
                    max
                } else {
                    (1.0 - (1.0 - success_probability).powf(max)) / success_probability
                }
            }
        };
        Ok(attempts / (self.expected_overhead_s() + attempts * period))
    }

    /// Long-run success rate implied by the model success probability.
    pub fn expected_rate_hz(&self, mode: Mode) -> Result<f64, LinkError> {
        let p: f64 = herald_operators(&self.physics, 0.0, true)?.iter().map(|o| o.probability()).sum();
        Ok(p * self.effective_attempt_rate_hz(mode, p)?)
    }
}

/// What a summary needs besides the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryContext {
    pub mode: Mode,
    pub duration_s: f64,
    pub readout: ReadoutModel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisCounts {
    pub zz: [u64; 4],
    pub xx: [u64; 4],
    pub yy: [u64; 4],
}

impl BasisCounts {
    pub fn get(&self, b: Pauli) -> &[u64; 4] {
        match b {
            Pauli::Z => &self.zz,
            Pauli::X => &self.xx,
            Pauli::Y => &self.yy,
        }
    }

    fn get_mut(&mut self, b: Pauli) -> &mut [u64; 4] {
        match b {
            Pauli::Z => &mut self.zz,
            Pauli::X => &mut self.xx,
            Pauli::Y => &mut self.yy,
        }
    }

    fn merged(&self, other: &Self) -> Self {
        let add = |a: [u64; 4], b: [u64; 4]| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]];
        Self { zz: add(self.zz, other.zz), xx: add(self.xx, other.xx), yy: add(self.yy, other.yy) }
    }
}

/// Correlator analysis of one set of counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorAnalysis {
    pub raw: CorrelatorTriple,
    /// After readout unfolding.
    pub corrected: CorrelatorTriple,
    pub fidelity: f64,
    pub fidelity_err: f64,
}

fn analyse(counts: &BasisCounts, readout: &ReadoutModel, target: BellSign) -> Option<CorrelatorAnalysis> {
    let mut raw = [0.0; 3];
    let mut corrected = [0.0; 3];
    let mut shots = [0.0; 3];
    for (i, b) in Pauli::ALL.iter().enumerate() {
        let c = counts.get(*b);
        let n: u64 = c.iter().sum();
        if n == 0 {
            return None;
        }
        let dist = OutcomeDistribution(c.map(|x| x as f64));
        raw[i] = dist.correlator();
        corrected[i] = unfold_readout(&dist, readout, 50).ok()?.correlator();
        shots[i] = n as f64;
    }
    // Pauli::ALL is ordered Z, X, Y.
    let triple = |v: [f64; 3]| CorrelatorTriple { zz: v[0], xx: v[1], yy: v[2] };
    let corrected = triple(corrected);
    let err = 0.25
        * (0..3)
            .map(|i| correlator_standard_error([corrected.zz, corrected.xx, corrected.yy][i], shots[i]).powi(2))
            .sum::<f64>()
            .sqrt();
    Some(CorrelatorAnalysis {
        raw: triple(raw),
        corrected,
        fidelity: fidelity_from_correlators(&corrected, target),
        fidelity_err: err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub detector: Detector,
    pub heralds: u64,
    pub delivered: u64,
    pub feed_forward: u64,
    pub counts: BasisCounts,
    /// Target Bell state after any feed-forward.
    pub target: BellSign,
    pub correlators: Option<CorrelatorAnalysis>,
    /// Mean fidelity of the delivered states.
    pub state_fidelity: Option<f64>,
}

/// Run summary; every number is an aggregate of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub duration_s: f64,
    pub blocks: u64,
    pub attempts: u64,
    pub successes: u64,
    pub rate_hz: f64,
    pub dual_clicks: u64,
    pub protocol_faults: u64,
    pub detectors: [DetectorSummary; 2],
    /// Heralded runs pool both branches against Ψ⁻; post-selected runs
    /// average the per-detector values.
    pub fidelity: Option<f64>,
    pub state_fidelity: Option<f64>,
}

fn target_sign(mode: Mode, d: Detector) -> BellSign {
    match mode {
        Mode::PostSelected => d.heralded_sign(),
        Mode::Heralded => BellSign::Minus,
    }
}

pub fn summarize(log: &[Event], ctx: &SummaryContext) -> RunSummary {
    let mut blocks = 0;
    let mut attempts = 0;
    let mut dual = 0;
    let mut faults = 0;
    let mut heralds = [0u64; 2];
    let mut delivered = [0u64; 2];
    let mut ff = [0u64; 2];
    let mut counts = [BasisCounts::default(); 2];
    let mut fid_sum = [0.0; 2];
    for e in log {
        match &e.kind {
            EventKind::BlockEnd { attempts: a, .. } => {
                blocks += 1;
                attempts += a;
            }
            EventKind::Herald { detector, dual_click, .. } => {
                heralds[detector.index()] += 1;
                dual += u64::from(*dual_click);
            }
            EventKind::ProtocolFault { .. } => faults += 1,
            EventKind::Delivered { detector, feed_forward, basis, outcome, fidelity, .. } => {
                let d = detector.index();
                delivered[d] += 1;
                ff[d] += u64::from(*feed_forward);
                counts[d].get_mut(*basis)[usize::from(outcome[0] << 1 | outcome[1])] += 1;
                fid_sum[d] += fidelity;
            }
            _ => {}
        }
    }
    let detectors = Detector::BOTH.map(|d| {
        let i = d.index();
        let target = target_sign(ctx.mode, d);
        DetectorSummary {
            detector: d,
            heralds: heralds[i],
            delivered: delivered[i],
            feed_forward: ff[i],
            counts: counts[i],
            target,
            correlators: analyse(&counts[i], &ctx.readout, target),
            state_fidelity: (delivered[i] > 0).then(|| fid_sum[i] / delivered[i] as f64),
        }
    });
    let successes = delivered[0] + delivered[1];
    let fidelity = match ctx.mode {
        Mode::Heralded => analyse(&counts[0].merged(&counts[1]), &ctx.readout, BellSign::Minus).map(|a| a.fidelity),
        Mode::PostSelected => match (&detectors[0].correlators, &detectors[1].correlators) {
            (Some(a), Some(b)) => Some(0.5 * (a.fidelity + b.fidelity)),
            _ => None,
        },
    };
    RunSummary {
        mode: ctx.mode,
        duration_s: ctx.duration_s,
        blocks,
        attempts,
        successes,
        rate_hz: if ctx.duration_s > 0.0 { successes as f64 / ctx.duration_s } else { 0.0 },
        dual_clicks: dual,
        protocol_faults: faults,
        detectors,
        fidelity,
        state_fidelity: (successes > 0).then(|| (fid_sum[0] + fid_sum[1]) / successes as f64),
    }
}

/// Result of one simulated run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: Vec<Event>,
    pub summary: RunSummary,
    pub context: SummaryContext,
    pub plan: EmissionPlan,
    pub attempt_period_ps: u64,
    pub success_probability: f64,
    /// Delivered state per detector, when that detector can herald.
    pub states: [Option<TwoQubitState>; 2],
}

#[derive(Debug, Clone, Copy)]
enum Action {
    StartCr { node: usize },
    CrPassed { node: usize, tries: u64 },
    BlockStart,
    Emission { attempt: u64 },
    Click { attempt: u64, start_ps: u64, detector: Detector },
    HeraldArrival { node: usize, attempt: u64, start_ps: u64, detector: Detector },
    Deliver { attempt: u64, detector: Detector },
    BlockEnd { attempts: u64 },
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    entity: Entity,
    seq: u64,
    action: Action,
}

impl Scheduled {
    fn key(&self) -> (u64, Entity, u64) {
        (self.time, self.entity, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

struct Streams {
    cr: ChaCha8Rng,
    success: ChaCha8Rng,
    click: ChaCha8Rng,
    jitter: ChaCha8Rng,
    readout: ChaCha8Rng,
}

struct Simulator<'a> {
    setup: &'a LinkSetup,
    mode: Mode,
    plan: EmissionPlan,
    timing: Option<HeraldedTiming>,
    tof: [u64; 2],
    heartbeat: u64,
    window: AcceptanceWindow,
    end_ps: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    log: Vec<Event>,
    rng: Streams,
    jitter: Option<Normal<f64>>,
    success_probability: f64,
    branch_weight: [f64; 2],
    outcome_cdf: [[[f64; 4]; 3]; 2],
    fidelity: [f64; 2],
    feed_forward: [bool; 2],
    block: u64,
    ready: [Option<u64>; 2],
    next_attempt: u64,
    current_block_first: u64,
    pending_arrivals: BTreeMap<u64, (u8, u64)>,
}

impl<'a> Simulator<'a> {
    fn schedule(&mut self, time: u64, entity: Entity, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, entity, seq: self.seq, action }));
    }

    fn record(&mut self, time_ps: u64, entity: Entity, kind: EventKind) {
        self.log.push(Event { time_ps, entity, kind });
    }

    fn run(mut self) -> Vec<Event> {
        for n in 0..2 {
            self.schedule(0, Entity::node(n), Action::StartCr { node: n });
        }
        while let Some(Reverse(s)) = self.queue.pop() {
            if s.time >= self.end_ps {
                break;
            }
            self.handle(s.time, s.entity, s.action);
        }
        self.log
    }

    fn geometric_gap(&mut self) -> Option<u64> {
        if self.success_probability <= 0.0 {
            return None;
        }
        let g = Geometric::new(self.success_probability).expect("probability validated");
        Some(g.sample(&mut self.rng.success))
    }

    fn handle(&mut self, t: u64, entity: Entity, action: Action) {
        match action {
            Action::StartCr { node } => {
                let g = Geometric::new(self.setup.schedule.cr_pass_probability).expect("validated");
                let tries = g.sample(&mut self.rng.cr) + 1;
                let cr = us_to_ps(self.setup.schedule.cr_check_us);
                self.schedule(t + tries * cr, entity, Action::CrPassed { node, tries });
            }
            Action::CrPassed { node, tries } => {
                self.record(t, entity, EventKind::CrCheckPassed { block: self.block, tries });
                self.ready[node] = Some(t);
                if let [Some(a), Some(b)] = self.ready {
                    let start = ceil_to(a.max(b) + self.setup.handshake_ps(), self.heartbeat);
                    self.schedule(start, Entity::Delft, Action::BlockStart);
                }
            }
            Action::BlockStart => {
                self.ready = [None, None];
                self.record(t, entity, EventKind::BlockStart { block: self.block });
                let first = t + u64::from(self.setup.schedule.stabilization_heartbeats) * self.heartbeat;
                match self.mode {
                    Mode::PostSelected => self.plan_post_selected_block(first),
                    Mode::Heralded => self.plan_heralded_block(first),
                }
            }
            Action::Emission { attempt } => {
                self.record(t, entity, EventKind::Emission { attempt });
            }
            Action::Click { attempt, start_ps, detector } => {
                let decisions = fpga_heralder(&[Click { time_ps: t, detector }], self.window, self.heartbeat, 0)
                    .expect("window validated before the run");
                for d in decisions {
                    self.record(
                        t,
                        entity,
                        EventKind::Herald { attempt, detector: d.detector, dual_click: d.dual_click },
                    );
                    let arrivals = herald_arrivals(d.time_ps, &self.plan, self.tof);
                    for (n, arrival) in arrivals.into_iter().enumerate() {
                        let jitter =
                            self.jitter.map(|j| j.sample(&mut self.rng.jitter).abs().round() as u64).unwrap_or(0);
                        self.schedule(
                            arrival + jitter,
                            Entity::node(n),
                            Action::HeraldArrival { node: n, attempt, start_ps, detector: d.detector },
                        );
                    }
                }
            }
            Action::HeraldArrival { node, attempt, start_ps, detector } => {
                let poll = match self.timing {
                    Some(h) => start_ps + h.poll_ps[node],
                    None => {
                        start_ps
                            + self.plan.emission_offset_ps[node]
                            + 2 * self.tof[node]
                            + self.plan.herald_delay_ps[node]
                            + us_to_ps(self.setup.schedule.polling_margin_us)
                    }
                };
                if t > poll {
                    self.record(t, entity, EventKind::ProtocolFault { attempt, late_by_ps: t - poll });
                }
                self.record(t, entity, EventKind::HeraldArrival { attempt, detector, poll_ps: poll });
                let entry = self.pending_arrivals.entry(attempt).or_insert((0, 0));
                entry.0 += 1;
                entry.1 = entry.1.max(t);
                if entry.0 == 2 {
                    let latest = entry.1;
                    self.pending_arrivals.remove(&attempt);
                    let at = match self.timing {
                        Some(h) => latest.max(start_ps + h.basis_selection_ps[0].max(h.basis_selection_ps[1])),
                        None => latest,
                    };
                    self.schedule(at, Entity::Delft, Action::Deliver { attempt, detector });
                }
            }
            Action::Deliver { attempt, detector } => {
                let d = detector.index();
                let basis_index = self.rng.readout.random_range(0..3);
                let basis = Pauli::ALL[basis_index];
                let u: f64 = self.rng.readout.random();
                let cdf = self.outcome_cdf[d][basis_index];
                let k = cdf.iter().position(|&c| u < c).unwrap_or(3) as u8;
                self.record(
                    t,
                    entity,
                    EventKind::Delivered {
                        attempt,
                        detector,
                        feed_forward: self.feed_forward[d],
                        basis,
                        outcome: [k >> 1, k & 1],
                        fidelity: self.fidelity[d],
                    },
                );
                if self.mode == Mode::Heralded {
                    let used = attempt + 1 - self.current_block_first;
                    self.schedule(
                        t + us_to_ps(self.setup.schedule.readout_us),
                        Entity::Delft,
                        Action::BlockEnd { attempts: used },
                    );
                }
            }
            Action::BlockEnd { attempts } => {
                self.record(t, entity, EventKind::BlockEnd { block: self.block, attempts });
                self.block += 1;
                for n in 0..2 {
                    self.schedule(t, Entity::node(n), Action::StartCr { node: n });
                }
            }
        }
    }

    fn schedule_success(&mut self, attempt: u64, start: u64) {
        for n in 0..2 {
            self.schedule(start + self.plan.emission_offset_ps[n], Entity::node(n), Action::Emission { attempt });
        }
        let r: f64 = self.rng.click.random();
        let d = if r * (self.branch_weight[0] + self.branch_weight[1]) < self.branch_weight[0] {
            Detector::One
        } else {
            Detector::Two
        };
        // Arrival inside the window follows the truncated exponential.
        let decay = self.setup.physics.decay_ns;
        let frac = window_signal_fraction(self.setup.physics.window_ns, decay);
        let u: f64 = self.rng.click.random();
        let delay_ns = -decay * (1.0 - u * frac).ln();
        let delay = ((delay_ns * 1e3).floor() as u64).min(self.window.length_ps - 1);
        let arrival = start + self.plan.emission_offset_ps[0] + self.tof[0];
        self.schedule(arrival + delay, Entity::Midpoint, Action::Click { attempt, start_ps: start, detector: d });
    }

    fn plan_post_selected_block(&mut self, first: u64) {
        let rounds = u64::from(self.setup.schedule.rounds_per_block);
        let base = self.next_attempt;
        self.current_block_first = base;
        let mut i = 0;
        while let Some(gap) = self.geometric_gap() {
            i += gap;
            if i >= rounds {
                break;
            }
            self.schedule_success(base + i, first + i * self.heartbeat);
            i += 1;
        }
        self.next_attempt += rounds;
        self.schedule(first + rounds * self.heartbeat, Entity::Delft, Action::BlockEnd { attempts: rounds });
    }

    fn plan_heralded_block(&mut self, first: u64) {
        let max = u64::from(self.setup.schedule.max_heralded_attempts);
        let period = self.timing.expect("heralded timing").period_ps;
        let base = self.next_attempt;
        self.current_block_first = base;
        match self.geometric_gap().filter(|&k| k < max) {
            Some(k) => {
                self.schedule_success(base + k, first + k * period);
                self.next_attempt += k + 1;
            }
            None => {
                self.next_attempt += max;
                self.schedule(first + max * period, Entity::Delft, Action::BlockEnd { attempts: max });
            }
        }
    }
}

/// Simulates `duration_s` of operation in the given mode.
pub fn run_link(setup: &LinkSetup, mode: Mode, duration_s: f64, seeds: SeedTree) -> Result<RunOutput, LinkError> {
    run_link_with_phase_error(setup, mode, duration_s, seeds, 0.0)
}

/// As [`run_link`], with the entangled-state phase off from the one the
/// readout bases assume by `phase_error_deg` (a miscalibrated setpoint).
pub fn run_link_with_phase_error(
    setup: &LinkSetup,
    mode: Mode,
    duration_s: f64,
    seeds: SeedTree,
    phase_error_deg: f64,
) -> Result<RunOutput, LinkError> {
    setup.validate()?;
    if !phase_error_deg.is_finite() {
        return Err(LinkError::NotFinite { name: "phase_error_deg", value: phase_error_deg });
    }
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(LinkError::NotPositive { name: "duration_s", value: duration_s });
    }
    let plan = setup.plan()?;
    let timing = match mode {
        Mode::PostSelected => None,
        Mode::Heralded => Some(setup.heralded_timing()?),
    };
    let heartbeat = setup.topology.heartbeat_ps();
    let window = AcceptanceWindow {
        offset_ps: plan.midpoint_arrival_ps % heartbeat,
        length_ps: (setup.physics.window_ns * 1e3).round() as u64,
    };
    fpga_heralder(&[], window, heartbeat, 0)?;

    let ops = herald_operators(&setup.physics, phase_error_deg.to_radians(), true)?;
    let readout = setup.physics.readout_model();
    let mut states: [Option<TwoQubitState>; 2] = [None, None];
    let mut outcome_cdf = [[[1.0; 4]; 3]; 2];
    let mut fidelity = [0.0; 2];
    let mut feed_forward = [false; 2];
    for d in Detector::BOTH {
        let i = d.index();
        if ops[i].probability() <= 0.0 {
            continue;
        }
        let mut state = ops[i].to_state()?;
        if let Some(h) = timing {
            for n in 0..2 {
                state = state.dephase(n, h.extra_dephasing[n]);
            }
            feed_forward[i] = d.heralded_sign() == BellSign::Plus;
            state = apply_detector_feedforward(&state, d);
        }
        fidelity[i] = state.bell_fidelity(target_sign(mode, d), 0.0);
        for (b, basis) in Pauli::ALL.iter().enumerate() {
            let p = apply_readout(&state, &readout, [*basis, *basis]).normalized().0;
            let mut acc = 0.0;
            for k in 0..4 {
                acc += p[k];
                outcome_cdf[i][b][k] = acc;
            }
        }
        states[i] = Some(state);
    }
    let branch_weight = [ops[0].probability(), ops[1].probability()];
    let success_probability = branch_weight[0] + branch_weight[1];
    let jitter = (setup.topology.clock_jitter_ps > 0.0)
        .then(|| Normal::new(0.0, setup.topology.clock_jitter_ps).expect("jitter validated"));
    let sim = Simulator {
        setup,
        mode,
        plan,
        timing,
        tof: setup.topology.time_of_flight_ps(),
        heartbeat,
        window,
        end_ps: (duration_s * 1e12).round() as u64,
        queue: BinaryHeap::new(),
        seq: 0,
        log: Vec::new(),
        rng: Streams {
            cr: seeds.rng("cr_check"),
            success: seeds.rng("success"),
            click: seeds.rng("click"),
            jitter: seeds.rng("jitter"),
            readout: seeds.rng("readout"),
        },
        jitter,
        success_probability,
        branch_weight,
        outcome_cdf,
        fidelity,
        feed_forward,
        block: 0,
        ready: [None, None],
        next_attempt: 0,
        current_block_first: 0,
        pending_arrivals: BTreeMap::new(),
    };
    let log = sim.run();
    let context = SummaryContext { mode, duration_s, readout };
    let summary = summarize(&log, &context);
    let attempt_period_ps = timing.map_or(heartbeat, |h| h.period_ps);
    Ok(RunOutput { log, summary, context, plan, attempt_period_ps, success_probability, states })
}

pub fn run_post_selected(setup: &LinkSetup, duration_s: f64, seeds: SeedTree) -> Result<RunOutput, LinkError> {
    run_link(setup, Mode::PostSelected, duration_s, seeds)
}

pub fn run_heralded(setup: &LinkSetup, duration_s: f64, seeds: SeedTree) -> Result<RunOutput, LinkError> {
    run_link(setup, Mode::Heralded, duration_s, seeds)
}

/// Broken log invariant.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogViolation {
    #[error("event {index} at {time_ps} ps precedes its predecessor")]
    OutOfOrder { index: usize, time_ps: u64 },
    #[error("attempt {attempt}: {what}")]
    Causality { attempt: u64, what: String },
    #[error("attempt {attempt}: expected one herald and one delivery, found {heralds} and {deliveries}")]
    Accounting { attempt: u64, heralds: usize, deliveries: usize },
    #[error("attempt {attempt}: feed-forward flag does not match detector {detector}")]
    FeedForward { attempt: u64, detector: Detector },
}

#[derive(Default)]
struct AttemptTrace {
    emission: [Option<u64>; 2],
    herald: Vec<(u64, Detector)>,
    arrival: [Option<u64>; 2],
    delivered: Vec<(u64, Detector, bool)>,
}

/// Checks ordering, causality, herald/delivery accounting and feed-forward
/// flags of a log produced with `setup`.
pub fn check_log(log: &[Event], setup: &LinkSetup, mode: Mode) -> Result<(), LogViolation> {
    let tof = setup.topology.time_of_flight_ps();
    let mut traces: BTreeMap<u64, AttemptTrace> = BTreeMap::new();
    let mut last = 0;
    for (index, e) in log.iter().enumerate() {
        if e.time_ps < last {
            return Err(LogViolation::OutOfOrder { index, time_ps: e.time_ps });
        }
        last = e.time_ps;
        match &e.kind {
            EventKind::Emission { attempt } => {
                if let Some(n) = e.entity.node_index() {
                    traces.entry(*attempt).or_default().emission[n] = Some(e.time_ps);
                }
            }
            EventKind::Herald { attempt, detector, .. } => {
                traces.entry(*attempt).or_default().herald.push((e.time_ps, *detector));
            }
            EventKind::HeraldArrival { attempt, .. } => {
                if let Some(n) = e.entity.node_index() {
                    traces.entry(*attempt).or_default().arrival[n] = Some(e.time_ps);
                }
            }
            EventKind::Delivered { attempt, detector, feed_forward, .. } => {
                traces.entry(*attempt).or_default().delivered.push((e.time_ps, *detector, *feed_forward));
            }
            _ => {}
        }
    }
    for (attempt, tr) in traces {
        let fail = |what: String| Err(LogViolation::Causality { attempt, what });
        let Some(&(herald_t, detector)) = tr.herald.first() else {
            if !tr.delivered.is_empty() {
                return fail("delivery without herald".into());
            }
            continue;
        };
        if tr.herald.len() != 1 || tr.delivered.len() > 1 {
            return Err(LogViolation::Accounting { attempt, heralds: tr.herald.len(), deliveries: tr.delivered.len() });
        }
        for (n, &flight) in tof.iter().enumerate() {
            match tr.emission[n] {
                Some(em) if herald_t >= em + flight => {}
                Some(_) => return fail(format!("herald before the photon from node {n} arrived")),
                None => return fail(format!("herald without emission at node {n}")),
            }
            if let Some(arr) = tr.arrival[n] {
                if arr < herald_t + flight {
                    return fail(format!("herald reached node {n} faster than light in fiber"));
                }
            }
        }
        if let Some(&(t, d, ff)) = tr.delivered.first() {
            if d != detector {
                return fail("delivered detector differs from herald".into());
            }
            if tr.arrival.iter().any(|a| a.is_none_or(|a| a > t)) {
                return fail("delivery before herald arrival".into());
            }
            let expected = mode == Mode::Heralded && d.heralded_sign() == BellSign::Plus;
            if ff != expected {
                return Err(LogViolation::FeedForward { attempt, detector: d });
            }
        }
    }
    Ok(())
}
