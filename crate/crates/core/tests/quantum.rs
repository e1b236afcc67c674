use metrolink_core::quantum::*;
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

const EPS: f64 = 1e-12;

fn random_state(entries: &[f64], dim: usize) -> TwoQubitState {
    let a =
        DMatrix::from_fn(dim, dim, |i, j| Complex64::new(entries[2 * (i * dim + j)], entries[2 * (i * dim + j) + 1]));
    let rho = &a * a.adjoint();
    let tr = rho.trace();
    TwoQubitState::from_matrix(rho / tr).expect("A A† is a valid state")
}

fn entries(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * dim * dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

#[test]
fn bell_states_have_textbook_correlators() {
    let plus = correlators(&bell_state(BellSign::Plus, 0.0));
    let minus = correlators(&bell_state(BellSign::Minus, 0.0));
    for (got, want) in
        [(plus.zz, -1.0), (plus.xx, 1.0), (plus.yy, 1.0), (minus.zz, -1.0), (minus.xx, -1.0), (minus.yy, -1.0)]
    {
        assert!((got - want).abs() < EPS, "{got} vs {want}");
    }
}

#[test]
fn bell_fidelity_of_bell_states() {
    for sign in [BellSign::Plus, BellSign::Minus] {
        let s = bell_state(sign, 0.3);
        assert!((s.bell_fidelity(sign, 0.3) - 1.0).abs() < EPS);
        let other = if sign == BellSign::Plus { BellSign::Minus } else { BellSign::Plus };
        assert!(s.bell_fidelity(other, 0.3).abs() < EPS);
    }
}

#[test]
fn werner_state_fidelity() {
    for p in [0.0, 0.25, 0.6, 1.0] {
        let bell = bell_state(BellSign::Minus, 0.0);
        let m =
            bell.matrix() * Complex64::from(p) + TwoQubitState::maximally_mixed().matrix() * Complex64::from(1.0 - p);
        let w = TwoQubitState::from_matrix(m).unwrap();
        let expected = p + (1.0 - p) / 4.0;
        assert!((w.bell_fidelity(BellSign::Minus, 0.0) - expected).abs() < EPS);
        assert!((fidelity_from_correlators(&correlators(&w), BellSign::Minus) - expected).abs() < EPS);
    }
}

#[test]
fn dephasing_scales_coherence() {
    let s = bell_state(BellSign::Plus, 0.0);
    for p in [0.0, 0.1, 0.5, 1.0] {
        let d = s.dephase(1, p);
        assert!((d.bell_fidelity(BellSign::Plus, 0.0) - (0.5 + 0.5 * (1.0 - p))).abs() < EPS);
        d.validate(STATE_TOLERANCE).unwrap();
    }
}

#[test]
fn feed_forward_maps_plus_to_minus() {
    let plus = bell_state(BellSign::Plus, 0.0);
    let out = apply_detector_feedforward(&plus, Detector::One);
    assert!((out.bell_fidelity(BellSign::Minus, 0.0) - 1.0).abs() < EPS);
    let minus = bell_state(BellSign::Minus, 0.0);
    assert_eq!(apply_detector_feedforward(&minus, Detector::Two), minus);
}

#[test]
fn ionized_node_reads_dark() {
    let s = TwoQubitState::product(Level::Ionized, Level::Zero);
    assert_eq!(s.dim(), 9);
    let d = OutcomeDistribution::from_state(&s, [Pauli::X, Pauli::X]);
    // Delft reads 1 always; The Hague |0> in X is 50/50.
    assert!((d.0[2] - 0.5).abs() < EPS && (d.0[3] - 0.5).abs() < EPS);
}

#[test]
fn invalid_matrices_are_rejected() {
    let mut m = DMatrix::<Complex64>::identity(4, 4);
    assert!(matches!(TwoQubitState::from_matrix(m.clone()), Err(StateError::Trace(_))));
    m[(0, 0)] = Complex64::from(1.5);
    m[(1, 1)] = Complex64::from(-0.5);
    m[(2, 2)] = Complex64::from(0.0);
    m[(3, 3)] = Complex64::from(0.0);
    assert!(matches!(TwoQubitState::from_matrix(m), Err(StateError::NotPositive(_))));
    assert!(matches!(
        TwoQubitState::from_matrix(DMatrix::identity(3, 3)),
        Err(StateError::Dimension { rows: 3, cols: 3 })
    ));
}

#[test]
fn symmetric_readout_shrinks_correlators() {
    // Independent flips with probability 1 − f on each side scale a
    // correlator by (2f − 1)².
    let f = 0.94;
    let model = ReadoutModel::symmetric(f);
    let s = bell_state(BellSign::Minus, 0.0);
    for b in Pauli::ALL {
        let ideal = OutcomeDistribution::from_state(&s, [b, b]).correlator();
        let seen = apply_readout(&s, &model, [b, b]).correlator();
        assert!((seen - (2.0 * f - 1.0).powi(2) * ideal).abs() < EPS);
    }
}

#[test]
fn unfolding_rejects_bad_input() {
    let m = ReadoutModel::symmetric(0.9);
    assert_eq!(unfold_readout(&OutcomeDistribution([0.0; 4]), &m, 10), Err(UnfoldError::EmptyHistogram));
    assert_eq!(unfold_readout(&OutcomeDistribution([1.0, -1.0, 0.0, 0.0]), &m, 10), Err(UnfoldError::InvalidBin));
    assert_eq!(unfold_readout(&OutcomeDistribution([1.0; 4]), &m, 0), Err(UnfoldError::NoIterations));
}

#[test]
fn standard_errors() {
    assert!((correlator_standard_error(0.0, 100.0) - 0.1).abs() < EPS);
    assert!(correlator_standard_error(0.5, 0.0).is_infinite());
    let c = CorrelatorTriple { zz: 0.0, xx: 0.0, yy: 0.0 };
    assert!((fidelity_standard_error(&c, [100.0; 3]) - 0.25 * (3.0f64 * 0.01).sqrt()).abs() < EPS);
}

proptest! {
    #[test]
    fn random_states_are_valid(e in entries(4), node in 0usize..2, p in 0.0f64..1.0) {
        let s = random_state(&e, 4);
        s.validate(STATE_TOLERANCE).unwrap();
        s.dephase(node, p).validate(1e-9).unwrap();
        s.apply_z(node).validate(1e-9).unwrap();
        let readout = ReadoutModel::symmetric(0.9);
        for b in Pauli::ALL {
            let d = apply_readout(&s, &readout, [b, b]);
            prop_assert!((d.total() - 1.0).abs() < 1e-9);
            prop_assert!(d.0.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn nine_level_states_are_valid(e in entries(9)) {
        let s = random_state(&e, 9);
        s.validate(STATE_TOLERANCE).unwrap();
        let total: f64 = OutcomeDistribution::from_state(&s, [Pauli::Y, Pauli::X]).total();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn correlator_fidelity_identity(e in entries(4), theta in 0.0f64..std::f64::consts::TAU) {
        let s = random_state(&e, 4);
        for sign in [BellSign::Plus, BellSign::Minus] {
            let from_corr = fidelity_from_correlators(&correlators(&s), sign);
            prop_assert!((from_corr - s.bell_fidelity(sign, 0.0)).abs() < 1e-9);
            let direct = s.fidelity_to_pure(&bell_state(sign, theta));
            prop_assert!((direct - s.bell_fidelity(sign, theta)).abs() < 1e-9);
        }
    }

    #[test]
    fn unfolding_round_trip(
        raw in prop::collection::vec(0.0f64..1.0, 4),
        fa in 0.85f64..0.999,
        fb in 0.85f64..0.999,
        asym in 0.0f64..0.04,
    ) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-3);
        let s: f64 = raw.iter().sum();
        let truth = OutcomeDistribution([raw[0] / s, raw[1] / s, raw[2] / s, raw[3] / s]);
        let model = ReadoutModel {
            delft: NodeReadout { p0_given0: fa, p1_given1: fa - asym },
            the_hague: NodeReadout { p0_given0: fb - asym, p1_given1: fb },
        };
        let back = unfold_readout(&truth.through(&model), &model, 50).unwrap();
        for k in 0..4 {
            prop_assert!((back.0[k] - truth.0[k]).abs() < 1e-3, "bin {k}: {} vs {}", back.0[k], truth.0[k]);
        }
    }
}
