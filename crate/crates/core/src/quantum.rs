//! Two-node qubit states with an optional dark "ionized" level per node,
//! Pauli correlators, readout confusion and its iterative Bayesian unfolding.

use nalgebra::{DMatrix, Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by [`TwoQubitState::validate`].
pub const STATE_TOLERANCE: f64 = 1e-10;

const LEVEL_PAIRS: [(usize, usize); 9] = [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (1, 2), (2, 0), (2, 1), (2, 2)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("density matrix must be 4x4 or 9x9, got {rows}x{cols}")]
    Dimension { rows: usize, cols: usize },
    #[error("density matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("density matrix trace is {0}, expected 1")]
    Trace(f64),
    #[error("density matrix has negative eigenvalue {0:.3e}")]
    NotPositive(f64),
    #[error("density matrix contains a non-finite entry")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnfoldError {
    #[error("observed histogram is empty")]
    EmptyHistogram,
    #[error("observed histogram has a negative or non-finite bin")]
    InvalidBin,
    #[error("at least one unfolding iteration is required")]
    NoIterations,
}

/// Local level of one node: the two qubit levels plus the dark ionized level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Zero,
    One,
    Ionized,
}

impl Level {
    fn index(self) -> usize {
        match self {
            Level::Zero => 0,
            Level::One => 1,
            Level::Ionized => 2,
        }
    }
}

/// Index of `|a b>` in the fixed basis order `|00>,|01>,|10>,|11>` followed by
/// the ionized combinations.
pub fn basis_index(a: Level, b: Level) -> usize {
    let key = (a.index(), b.index());
    LEVEL_PAIRS.iter().position(|&p| p == key).expect("all level pairs are listed")
}

/// Which midpoint detector clicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Detector {
    One,
    Two,
}

impl Detector {
    pub const BOTH: [Detector; 2] = [Detector::One, Detector::Two];

    /// Bell state heralded by a click in this detector.
    pub fn heralded_sign(self) -> BellSign {
        match self {
            Detector::One => BellSign::Plus,
            Detector::Two => BellSign::Minus,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Detector::One => 0,
            Detector::Two => 1,
        }
    }

    pub fn other(self) -> Detector {
        match self {
            Detector::One => Detector::Two,
            Detector::Two => Detector::One,
        }
    }
}

impl From<Detector> for u8 {
    fn from(d: Detector) -> u8 {
        match d {
            Detector::One => 1,
            Detector::Two => 2,
        }
    }
}

impl TryFrom<u8> for Detector {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Detector::One),
            2 => Ok(Detector::Two),
            other => Err(format!("detector must be 1 or 2, got {other}")),
        }
    }
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Relative sign of the `|10>` amplitude in `(|01> ± e^{iθ}|10>)/√2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellSign {
    Plus,
    Minus,
}

impl BellSign {
    pub fn value(self) -> f64 {
        match self {
            BellSign::Plus => 1.0,
            BellSign::Minus => -1.0,
        }
    }
}

/// Measurement basis for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::Z, Pauli::X, Pauli::Y];
}

impl std::fmt::Display for Pauli {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Pauli::X => "X",
            Pauli::Y => "Y",
            Pauli::Z => "Z",
        };
        f.write_str(s)
    }
}

type Local = [[Complex64; 3]; 3];

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn local_identity() -> Local {
    let mut m = [[c(0.0, 0.0); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = c(1.0, 0.0);
    }
    m
}

fn local_z() -> Local {
    let mut m = local_identity();
    m[1][1] = c(-1.0, 0.0);
    m
}

/// Rotation mapping the +1 eigenstate of `basis` onto `|0>`; the ionized
/// level is left alone.
fn local_rotation(basis: Pauli) -> Local {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = local_identity();
    match basis {
        Pauli::Z => {}
        Pauli::X => {
            m[0][0] = c(h, 0.0);
            m[0][1] = c(h, 0.0);
            m[1][0] = c(h, 0.0);
            m[1][1] = c(-h, 0.0);
        }
        Pauli::Y => {
            // H · S†
            m[0][0] = c(h, 0.0);
            m[0][1] = c(0.0, -h);
            m[1][0] = c(h, 0.0);
            m[1][1] = c(0.0, h);
        }
    }
    m
}

/// Density matrix of the two communication qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    matrix: DMatrix<Complex64>,
}

impl TwoQubitState {
    /// Wraps and validates a density matrix.
    pub fn from_matrix(matrix: DMatrix<Complex64>) -> Result<Self, StateError> {
        let state = Self::from_matrix_unchecked(matrix)?;
        state.validate(STATE_TOLERANCE)?;
        Ok(state)
    }

    /// Wraps a matrix after only a shape check.
    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<Complex64>) -> Result<Self, StateError> {
        let (rows, cols) = matrix.shape();
        if rows != cols || (rows != 4 && rows != 9) {
            return Err(StateError::Dimension { rows, cols });
        }
        Ok(Self { matrix })
    }

    /// Product state `|a b>`.
    pub fn product(a: Level, b: Level) -> Self {
        let dim = if a == Level::Ionized || b == Level::Ionized { 9 } else { 4 };
        let mut m = DMatrix::zeros(dim, dim);
        let i = basis_index(a, b);
        m[(i, i)] = c(1.0, 0.0);
        Self { matrix: m }
    }

    /// Identity over the qubit subspace, divided by 4.
    pub fn maximally_mixed() -> Self {
        Self { matrix: DMatrix::identity(4, 4) * c(0.25, 0.0) }
    }

    /// Pure state from an amplitude vector of length 4 or 9 (normalized here).
    pub fn pure(amplitudes: &[Complex64]) -> Result<Self, StateError> {
        let n = amplitudes.len();
        if n != 4 && n != 9 {
            return Err(StateError::Dimension { rows: n, cols: 1 });
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(StateError::NonFinite);
        }
        let m = DMatrix::from_fn(n, n, |i, j| amplitudes[i] * amplitudes[j].conj() / (norm * norm));
        Ok(Self { matrix: m })
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn has_ionized_levels(&self) -> bool {
        self.dim() == 9
    }

    /// Embeds a 4-dim state in the 9-dim space with empty ionized levels.
    pub fn with_ionized_levels(&self) -> Self {
        if self.has_ionized_levels() {
            return self.clone();
        }
        let mut m = DMatrix::zeros(9, 9);
        m.view_mut((0, 0), (4, 4)).copy_from(&self.matrix);
        Self { matrix: m }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Probability of finding the nodes in `|a b>`.
    pub fn population(&self, a: Level, b: Level) -> f64 {
        let i = basis_index(a, b);
        if i >= self.dim() {
            0.0
        } else {
            self.matrix[(i, i)].re
        }
    }

    /// Element `<01|ρ|10>`.
    pub fn coherence(&self) -> Complex64 {
        self.matrix[(1, 2)]
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.matrix + self.matrix.adjoint()) * c(0.5, 0.0);
        SymmetricEigen::new(herm).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Checks Hermiticity, unit trace and positivity within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), StateError> {
        if self.matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(StateError::NonFinite);
        }
        let dev = (&self.matrix - self.matrix.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if dev > tol {
            return Err(StateError::NotHermitian(dev));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > tol {
            return Err(StateError::Trace(tr));
        }
        let min = self.min_eigenvalue();
        if min < -tol {
            return Err(StateError::NotPositive(min));
        }
        Ok(())
    }

    /// `Tr(ρσ)`; equals the fidelity when `target` is pure.
    pub fn fidelity_to_pure(&self, target: &TwoQubitState) -> f64 {
        let (a, b) = match (self.dim(), target.dim()) {
            (x, y) if x == y => (self.clone(), target.clone()),
            _ => (self.with_ionized_levels(), target.with_ionized_levels()),
        };
        (a.matrix * b.matrix).trace().re
    }

    /// Fidelity to `(|01> ± e^{iθ}|10>)/√2`.
    pub fn bell_fidelity(&self, sign: BellSign, theta: f64) -> f64 {
        let p = self.population(Level::Zero, Level::One) + self.population(Level::One, Level::Zero);
        0.5 * p + (self.coherence() * Complex64::from_polar(sign.value(), theta)).re
    }

    fn local_map(&self, op_a: &Local, op_b: &Local) -> DMatrix<Complex64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            let (ai, bi) = LEVEL_PAIRS[i];
            let (aj, bj) = LEVEL_PAIRS[j];
            op_a[ai][aj] * op_b[bi][bj]
        })
    }

    fn conjugate_by(&self, op_a: &Local, op_b: &Local) -> Self {
        let u = self.local_map(op_a, op_b);
        Self { matrix: &u * &self.matrix * u.adjoint() }
    }

    /// Full dephasing with probability `p` on one node (node 0 is Delft).
    pub fn dephase(&self, node: usize, p: f64) -> Self {
        let mut m = self.matrix.clone();
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                let li = if node == 0 { LEVEL_PAIRS[i].0 } else { LEVEL_PAIRS[i].1 };
                let lj = if node == 0 { LEVEL_PAIRS[j].0 } else { LEVEL_PAIRS[j].1 };
                if li != lj && li < 2 && lj < 2 {
                    m[(i, j)] *= 1.0 - p;
                }
            }
        }
        Self { matrix: m }
    }

    /// Local Z on one node.
    pub fn apply_z(&self, node: usize) -> Self {
        let (id, z) = (local_identity(), local_z());
        if node == 0 {
            self.conjugate_by(&z, &id)
        } else {
            self.conjugate_by(&id, &z)
        }
    }
}

/// `(|01> ± e^{iθ}|10>)/√2`.
pub fn bell_state(sign: BellSign, theta: f64) -> TwoQubitState {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let amps = [c(0.0, 0.0), c(h, 0.0), Complex64::from_polar(h * sign.value(), theta), c(0.0, 0.0)];
    TwoQubitState::pure(&amps).expect("Bell amplitudes are normalized")
}

/// Expectation values of ZZ, XX and YY.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorTriple {
    pub zz: f64,
    pub xx: f64,
    pub yy: f64,
}

impl CorrelatorTriple {
    pub fn get(&self, basis: Pauli) -> f64 {
        match basis {
            Pauli::Z => self.zz,
            Pauli::X => self.xx,
            Pauli::Y => self.yy,
        }
    }
}

/// Correlators as measured: a dark (ionized) node reads -1 in every basis.
pub fn correlators(state: &TwoQubitState) -> CorrelatorTriple {
    let corr = |b: Pauli| OutcomeDistribution::from_state(state, [b, b]).correlator();
    CorrelatorTriple { zz: corr(Pauli::Z), xx: corr(Pauli::X), yy: corr(Pauli::Y) }
}

/// `¼(1 − ⟨ZZ⟩ ± ⟨XX⟩ ± ⟨YY⟩)`.
pub fn fidelity_from_correlators(c: &CorrelatorTriple, sign: BellSign) -> f64 {
    let s = sign.value();
    0.25 * (1.0 - c.zz + s * c.xx + s * c.yy)
}

/// Conditional Z on node Delft for the Ψ⁺-heralding detector so both
/// detector branches deliver Ψ⁻.
pub fn apply_detector_feedforward(state: &TwoQubitState, detector: Detector) -> TwoQubitState {
    match detector.heralded_sign() {
        BellSign::Plus => state.apply_z(0),
        BellSign::Minus => state.clone(),
    }
}

/// Readout assignment fidelities of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeReadout {
    /// P(read 0 | true 0).
    pub p0_given0: f64,
    /// P(read 1 | true 1).
    pub p1_given1: f64,
}

impl NodeReadout {
    pub fn symmetric(f: f64) -> Self {
        Self { p0_given0: f, p1_given1: f }
    }

    /// `m[read][true]`.
    pub fn confusion(&self) -> [[f64; 2]; 2] {
        [[self.p0_given0, 1.0 - self.p1_given1], [1.0 - self.p0_given0, self.p1_given1]]
    }
}

/// Per-node readout model; the ionized level always reads as 1 (dark).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutModel {
    pub delft: NodeReadout,
    pub the_hague: NodeReadout,
}

impl ReadoutModel {
    pub fn perfect() -> Self {
        Self::symmetric(1.0)
    }

    pub fn symmetric(f: f64) -> Self {
        Self { delft: NodeReadout::symmetric(f), the_hague: NodeReadout::symmetric(f) }
    }

    pub fn is_valid(&self) -> bool {
        [self.delft, self.the_hague]
            .iter()
            .all(|n| (0.0..=1.0).contains(&n.p0_given0) && (0.0..=1.0).contains(&n.p1_given1))
    }

    /// Joint confusion matrix `m[read][true]` over outcomes 00, 01, 10, 11.
    pub fn confusion_matrix(&self) -> [[f64; 4]; 4] {
        let a = self.delft.confusion();
        let b = self.the_hague.confusion();
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (t, v) in row.iter_mut().enumerate() {
                *v = a[r >> 1][t >> 1] * b[r & 1][t & 1];
            }
        }
        m
    }
}

/// Probabilities (or counts) over outcomes 00, 01, 10, 11, where bit 0 is the
/// +1 eigenvalue of the measured Pauli.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDistribution(pub [f64; 4]);

impl OutcomeDistribution {
    /// Ideal projective outcome distribution in the given bases.
    pub fn from_state(state: &TwoQubitState, bases: [Pauli; 2]) -> Self {
        let rotated = state.conjugate_by(&local_rotation(bases[0]), &local_rotation(bases[1]));
        let mut p = [0.0; 4];
        for (i, &(a, b)) in LEVEL_PAIRS.iter().enumerate().take(state.dim()) {
            let bit = |l: usize| usize::from(l != 0);
            p[(bit(a) << 1) | bit(b)] += rotated.matrix[(i, i)].re;
        }
        Self(p)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total();
        Self(self.0.map(|x| x / t))
    }

    /// `P(same) − P(different)` of the normalized histogram.
    pub fn correlator(&self) -> f64 {
        let p = self.0;
        (p[0] + p[3] - p[1] - p[2]) / self.total()
    }

    /// Pushes the distribution through the readout confusion.
    pub fn through(&self, model: &ReadoutModel) -> Self {
        let m = model.confusion_matrix();
        let mut out = [0.0; 4];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..4).map(|t| m[r][t] * self.0[t]).sum();
        }
        Self(out)
    }
}

/// Rotation, projective measurement and confusion-matrix application.
pub fn apply_readout(state: &TwoQubitState, model: &ReadoutModel, bases: [Pauli; 2]) -> OutcomeDistribution {
    OutcomeDistribution::from_state(state, bases).through(model)
}

/// Iteration budget for [`unfold_readout_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnfoldSettings {
    pub iterations: usize,
    /// Stop once the L1 norm of an update falls below this.
    pub tolerance: f64,
}

impl Default for UnfoldSettings {
    fn default() -> Self {
        Self { iterations: 50, tolerance: 1e-8 }
    }
}

/// Iterative Bayesian unfolding with the default tolerance.
pub fn unfold_readout(
    observed: &OutcomeDistribution,
    model: &ReadoutModel,
    iterations: usize,
) -> Result<OutcomeDistribution, UnfoldError> {
    unfold_readout_with(observed, model, UnfoldSettings { iterations, ..UnfoldSettings::default() })
}

/// Iterative Bayesian unfolding of an outcome histogram.
///
/// The prior is the matrix-inverse estimate clipped to the simplex, which is
/// already the fixed point when the histogram lies in the forward image.
pub fn unfold_readout_with(
    observed: &OutcomeDistribution,
    model: &ReadoutModel,
    settings: UnfoldSettings,
) -> Result<OutcomeDistribution, UnfoldError> {
    if settings.iterations == 0 {
        return Err(UnfoldError::NoIterations);
    }
    if observed.0.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(UnfoldError::InvalidBin);
    }
    let total = observed.total();
    if total <= 0.0 {
        return Err(UnfoldError::EmptyHistogram);
    }
    let obs = observed.0.map(|x| x / total);
    let cm = model.confusion_matrix();
    let r = Matrix4::from_fn(|i, j| cm[i][j]);

    let mut prior = match r.try_inverse() {
        Some(inv) => {
            let est = inv * Vector4::from_column_slice(&obs);
            let clipped: Vec<f64> = est.iter().map(|x| x.max(1e-12)).collect();
            let s: f64 = clipped.iter().sum();
            [clipped[0] / s, clipped[1] / s, clipped[2] / s, clipped[3] / s]
        }
        None => [0.25; 4],
    };

    for _ in 0..settings.iterations {
        let mut next = [0.0; 4];
        for (rd, &n) in obs.iter().enumerate() {
            let fwd: f64 = (0..4).map(|t| cm[rd][t] * prior[t]).sum();
            if fwd <= 0.0 || n == 0.0 {
                continue;
            }
            for t in 0..4 {
                next[t] += n * cm[rd][t] * prior[t] / fwd;
            }
        }
        let s: f64 = next.iter().sum();
        if s <= 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= s);
        let delta: f64 = next.iter().zip(prior.iter()).map(|(a, b)| (a - b).abs()).sum();
        prior = next;
        if delta < settings.tolerance {
            break;
        }
    }
    Ok(OutcomeDistribution(prior))
}

/// Binomial standard error of a correlator estimated from `n` shots.
pub fn correlator_standard_error(value: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - value * value).max(0.0) / n).sqrt()
}

/// Propagated standard error of `fidelity_from_correlators`.
pub fn fidelity_standard_error(c: &CorrelatorTriple, shots: [f64; 3]) -> f64 {
    let e = [
        correlator_standard_error(c.zz, shots[0]),
        correlator_standard_error(c.xx, shots[1]),
        correlator_standard_error(c.yy, shots[2]),
    ];
    0.25 * e.iter().map(|x| x * x).sum::<f64>().sqrt()
}
