use metrolink_core::calibration::*;
use metrolink_core::{LinkParameters, PerNode, SeedTree};
use proptest::prelude::*;

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = wrap_degrees(a - b);
    d.min(360.0 - d)
}

#[test]
fn flowchart_transitions_are_total() {
    use Stage::*;
    use StageOutcome::*;
    for stage in Stage::ALL {
        for outcome in StageOutcome::ALL {
            let next = next_stage(stage, outcome);
            let expected = match (stage, outcome) {
                (Done, _) => Done,
                (Snr, Pass) => Phase,
                (Phase, Pass) => Xsweepx,
                (Xsweepx, Pass) => Fid,
                (Fid, BlockComplete) => Fid,
                (Fid, Pass) => PhaseRecheck,
                (PhaseRecheck, Pass) => Done,
                _ => Snr,
            };
            assert_eq!(next, expected, "{stage:?} + {outcome:?}");
        }
    }
}

#[test]
fn fit_needs_four_points_and_spread() {
    assert_eq!(
        fit_cosine(&[0.0, 90.0, 180.0], &[1.0, 0.0, -1.0]),
        Err(CalibrationError::TooFewPoints { needed: 4, got: 3 })
    );
    assert_eq!(fit_cosine(&[10.0; 5], &[1.0; 5]), Err(CalibrationError::DegenerateFit));
    let x = full_circle(8);
    assert_eq!(fit_cosine_weighted(&x, &[0.0; 8], &[0.0; 8]), Err(CalibrationError::DegenerateFit));
}

#[test]
fn clustered_setpoints_are_rejected() {
    let p = LinkParameters::heralded();
    let source = FringeSource::from_physics(&p);
    let setpoints: Vec<f64> = (0..10).map(|i| 10.0 * i as f64).collect();
    let mut rng = SeedTree::new(1).rng("fringe");
    assert_eq!(measure_phase_fringe(&source, &setpoints, &mut rng), Err(CalibrationError::InsufficientSpan));
}

#[test]
fn wrap_stays_in_range() {
    for x in [-720.0, -1e-12, 0.0, 359.999, 360.0, 1e6] {
        let w = wrap_degrees(x);
        assert!((0.0..360.0).contains(&w), "{x} -> {w}");
    }
}

#[test]
fn snr_measurement_matches_model() {
    let p = LinkParameters::heralded();
    let mut rng = SeedTree::new(3).rng("snr");
    let m = measure_snr(&p, 10_000_000_000, &mut rng).unwrap();
    let model = model_snr(&p);
    assert!((m.snr - model).abs() < 4.0 * m.snr_err + 1e-9, "{} ± {} vs {model}", m.snr, m.snr_err);
    // A bright shot clicks unless both the signal and the dark count miss.
    let noise: f64 = p.noise_click_probability().iter().sum();
    let bright = 1.0 - (1.0 - p.node_detection(0)) * (1.0 - noise);
    let se = (bright * (1.0 - bright) / m.shots as f64).sqrt();
    assert!((m.signal_cps.delft - bright).abs() < 4.0 * se, "{} vs {bright}", m.signal_cps.delft);
}

#[test]
fn fringe_contrast_matches_expectation() {
    let p = LinkParameters::heralded();
    let source = FringeSource { phase_offset_deg: 70.0, ..FringeSource::from_physics(&p) };
    let mut rng = SeedTree::new(4).rng("fringe");
    let cal = measure_phase_fringe(&source, &full_circle(16), &mut rng).unwrap();
    assert!(
        (cal.contrast - source.expected_contrast()).abs() < 0.03,
        "{} vs {}",
        cal.contrast,
        source.expected_contrast()
    );
    assert!(angle_gap(cal.optical_phase_deg, 70.0) < 3.0, "{}", cal.optical_phase_deg);
}

#[test]
fn noiseless_xsweep_recovers_state_phase() {
    let p = LinkParameters::heralded();
    let settings = XsweepSettings { shots_per_angle: 1_000_000_000, ..XsweepSettings::default() };
    let mut rng = SeedTree::new(5).rng("xsweep");
    let x = measure_xsweepx(&p, 0.0, &settings, &mut rng).unwrap();
    assert!(angle_gap(x.state_phase_deg, 219.0) < 0.05, "{}", x.state_phase_deg);
    assert!((x.fit.amplitude / x.expected_amplitude - 1.0).abs() < 0.01);
    // Moving the setpoint moves the state phase by the same amount.
    let y = measure_xsweepx(&p, 30.0, &settings, &mut rng).unwrap();
    assert!(angle_gap(y.state_phase_deg, 249.0) < 0.05, "{}", y.state_phase_deg);
}

#[test]
fn nominal_thresholds_complete() {
    for (p, settings) in [
        (LinkParameters::heralded(), CalibrationSettings::heralded()),
        (LinkParameters::delayed_choice(), CalibrationSettings::delayed_choice()),
    ] {
        let thresholds = CalibrationThresholds::nominal(&p, &settings).unwrap();
        let mut rng = SeedTree::new(6).rng("calibration");
        let report = run_calibration_cycle(&thresholds, &p, &settings, &mut rng).unwrap();
        assert!(report.completed);
        assert_eq!(report.restarts, 0);
        assert_eq!(report.cycles, 1);
        assert_eq!(report.blocks.len(), settings.fid_blocks as usize);
        let phase = report.phase.expect("phase calibrated");
        assert!(phase.state_phase_deg.is_some());
        assert_eq!(report.stages.last().unwrap().stage, Stage::PhaseRecheck);
    }
}

#[test]
fn unreachable_gate_exhausts_cycles() {
    let p = LinkParameters::heralded();
    let settings = CalibrationSettings { max_cycles: 3, ..CalibrationSettings::heralded() };
    let mut thresholds = CalibrationThresholds::nominal(&p, &settings).unwrap();
    thresholds.min_counts_per_shot = PerNode::both(0.9);
    let mut rng = SeedTree::new(7).rng("calibration");
    let report = run_calibration_cycle(&thresholds, &p, &settings, &mut rng).unwrap();
    assert!(!report.completed);
    assert_eq!(report.cycles, 3);
    assert!(report.restarts >= 2);
    assert!(report.blocks.is_empty());
    assert!(report.stages.iter().all(|s| s.stage == Stage::Snr && s.outcome == StageOutcome::Fail));
}

#[test]
fn cr_degradation_triggers_breakout() {
    let p = LinkParameters::heralded();
    let settings = CalibrationSettings {
        cr_degradation: Some(CrDegradation { from_block: 2, pass_probability: PerNode::both(0.03) }),
        ..CalibrationSettings::heralded()
    };
    let thresholds = CalibrationThresholds::nominal(&p, &settings).unwrap();
    let mut rng = SeedTree::new(8).rng("calibration");
    let report = run_calibration_cycle(&thresholds, &p, &settings, &mut rng).unwrap();
    let first = report.blocks.iter().position(|b| b.breakout).expect("a breakout");
    assert_eq!(first, 2);
    assert!(report.restarts >= 1);
    assert!(report.stages.iter().any(|s| s.outcome == StageOutcome::Breakout));
}

#[test]
fn thresholds_must_be_positive() {
    let p = LinkParameters::heralded();
    let mut t = CalibrationThresholds::nominal(&p, &CalibrationSettings::heralded()).unwrap();
    t.validate().unwrap();
    t.min_contrast = 0.0;
    assert!(matches!(t.validate(), Err(CalibrationError::NotPositive { name: "min_contrast", .. })));
}

#[test]
fn calibration_is_reproducible() {
    let p = LinkParameters::heralded();
    let settings = CalibrationSettings::heralded();
    let t = CalibrationThresholds::nominal(&p, &settings).unwrap();
    let run = |seed| run_calibration_cycle(&t, &p, &settings, &mut SeedTree::new(seed).rng("calibration")).unwrap();
    assert_eq!(run(11), run(11));
}

proptest! {
    #[test]
    fn cosine_fit_recovers_parameters(
        offset in -1.0f64..1.0,
        amplitude in 0.05f64..2.0,
        phase in 0.0f64..360.0,
        points in 4usize..40,
    ) {
        let x = full_circle(points);
        let y: Vec<f64> = x.iter().map(|&a| offset + amplitude * (a - phase).to_radians().cos()).collect();
        let fit = fit_cosine(&x, &y).unwrap();
        prop_assert!(angle_gap(fit.phase_deg, phase) < 0.5, "{} vs {phase}", fit.phase_deg);
        prop_assert!((fit.amplitude / amplitude - 1.0).abs() < 0.01);
        prop_assert!((fit.offset - offset).abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_error_covers_truth(seed in any::<u64>(), phase in 0.0f64..360.0) {
        use rand_distr::{Distribution, Normal};
        let mut rng = SeedTree::new(seed).rng("noise");
        let noise = Normal::new(0.0, 0.02).unwrap();
        let x = full_circle(24);
        let y: Vec<f64> = x.iter().map(|&a| 0.6 * (a - phase).to_radians().cos() + noise.sample(&mut rng)).collect();
        let fit = fit_cosine_weighted(&x, &y, &[0.02; 24]).unwrap();
        // Six standard errors keeps false alarms negligible across cases.
        prop_assert!(angle_gap(fit.phase_deg, phase) < 6.0 * fit.phase_err_deg);
    }
}
