use metrolink_core::quantum::{BellSign, Detector, STATE_TOLERANCE};
use metrolink_core::singleclick::*;
use metrolink_core::SeedTree;
use proptest::prelude::*;
use rand::Rng;

/// Clean link: no noise sources, balanced nodes.
fn clean(alpha: f64, eta: f64) -> LinkParameters {
    LinkParameters {
        detection_probability: PerNode::both(eta),
        alpha: PerNode::both(alpha),
        background_hz: PerDetector::new(0.0, 0.0),
        double_excitation: PerNode::both(0.0),
        phase_noise_std_deg: 0.0,
        dephasing: PerNode::both(0.0),
        spectral_diffusion_fwhm_mhz: 0.0,
        mode_overlap: 1.0,
        ionization: PerNode::both(0.0),
        psb_efficiency: PerNode::both(0.0),
        ..LinkParameters::heralded()
    }
}

#[test]
fn clean_link_gives_one_minus_alpha() {
    // Single-click textbook result: F ≈ 1 − α for small detection probability.
    for alpha in [0.02, 0.05, 0.1, 0.25] {
        let out = simulate(&clean(alpha, 1e-5)).unwrap();
        for b in &out.branches {
            assert!((b.fidelity - (1.0 - alpha)).abs() < 1e-4, "alpha {alpha}: {}", b.fidelity);
        }
    }
}

#[test]
fn clean_success_probability_first_order() {
    let (alpha, eta) = (0.1, 2e-5);
    let p = clean(alpha, eta);
    let out = simulate(&p).unwrap();
    let expected = 2.0 * alpha * p.node_detection(0);
    assert!((out.success_probability / expected - 1.0).abs() < 1e-3, "{} vs {expected}", out.success_probability);
    // Balanced beam splitter: the two detectors share the heralds.
    assert!((out.branches[0].probability - out.branches[1].probability).abs() < 1e-15);
}

#[test]
fn detectors_herald_opposite_bell_states() {
    let out = simulate(&clean(0.05, 1e-5)).unwrap();
    let one = &out.branch(Detector::One).state;
    let two = &out.branch(Detector::Two).state;
    assert!(one.bell_fidelity(BellSign::Plus, 0.0) > 0.94);
    assert!(two.bell_fidelity(BellSign::Minus, 0.0) > 0.94);
}

#[test]
fn closed_form_helpers() {
    assert!((window_signal_fraction(12.0, 12.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    assert_eq!(window_signal_fraction(0.0, 12.0), 0.0);
    assert!((excitation_probability(180.0) - 1.0).abs() < 1e-15);
    assert!((excitation_probability(90.0) - 0.5).abs() < 1e-15);
    assert_eq!(spectral_diffusion_coherence(0.0, 10.0, 12.0), 1.0);
}

#[test]
fn spectral_diffusion_matches_flat_wavepacket_limit() {
    // With a very long lifetime the wavepacket is flat across the window and
    // the average of exp(−σ²t²/2) over [0, W] is √(π/2)·erf(σW/√2)/(σW).
    let (fwhm, w) = (13.0, 15.0);
    let sigma = std::f64::consts::TAU * fwhm * 1e-3 / 2.354_820_045_030_949;
    let x = sigma * w / std::f64::consts::SQRT_2;
    // erf by series; x is small here.
    let erf = (0..30i32).fold(0.0, |acc, n| {
        let fact: f64 = (1..=n).map(f64::from).product();
        acc + (-1f64).powi(n) * x.powi(2 * n + 1) / (fact * f64::from(2 * n + 1))
    }) * 2.0
        / std::f64::consts::PI.sqrt();
    let expected = (std::f64::consts::PI / 2.0).sqrt() * erf / (sigma * w);
    let got = spectral_diffusion_coherence(fwhm, w, 1e9);
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn states_are_valid_density_matrices() {
    for p in [
        LinkParameters::delayed_choice(),
        LinkParameters::heralded(),
        LinkParameters::near_term(),
        LinkParameters::future(),
    ] {
        let out = simulate(&p).unwrap();
        for b in &out.branches {
            b.state.validate(STATE_TOLERANCE).unwrap();
            let direct = b.state.bell_fidelity(b.detector.heralded_sign(), 0.0);
            assert!((direct - b.fidelity).abs() < 1e-9);
        }
    }
}

#[test]
fn improvement_scenarios_reproduce_table() {
    let s = improvement_scenarios().unwrap();
    assert!((s[0].fidelity - 0.828).abs() <= 0.02, "near-term {}", s[0].fidelity);
    assert!((s[1].fidelity - 0.90).abs() <= 0.02, "future {}", s[1].fidelity);
}

#[test]
fn delayed_choice_detector_one_and_success_probability() {
    let dc = LinkParameters::delayed_choice();
    let out = simulate(&dc).unwrap();
    assert!((out.branches[0].fidelity - 0.568).abs() <= 0.015);
    let at20 = simulate(&dc.with_window(20.0)).unwrap();
    assert!((at20.success_probability / 7.2e-6 - 1.0).abs() <= 0.25, "{}", at20.success_probability);
}

#[test]
fn delayed_choice_budget_rows_within_three_points() {
    let b = error_budget(&LinkParameters::delayed_choice()).unwrap();
    let table = [
        (BudgetGroup::SignalToNoise, 0.327),
        (BudgetGroup::PhaseNoise, 0.098),
        (BudgetGroup::Dephasing, 0.023),
        (BudgetGroup::SpectralDiffusion, 0.045),
        (BudgetGroup::DoubleExcitation, 0.037),
        (BudgetGroup::Ionization, 0.054),
    ];
    for (g, want) in table {
        let got = b.contribution(g);
        assert!((got - want).abs() <= 0.03, "{}: {got} vs {want}", g.name());
    }
    assert!((b.total_infidelity - 0.431).abs() <= 0.03);
}

#[test]
fn budget_csv_shape() {
    let csv = error_budget(&LinkParameters::heralded()).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "parameter,value,infidelity_contribution");
    assert_eq!(lines.len(), 1 + BudgetGroup::ALL.len() + 3);
    for l in &lines[1..] {
        let last = l.rsplit(',').next().unwrap();
        assert!(last.parse::<f64>().is_ok(), "{l}");
    }
}

#[test]
fn ideal_budget_rows_vanish() {
    let ideal = ideal_parameters(&LinkParameters::heralded());
    let out = simulate(&ideal).unwrap();
    assert!(out.mean_fidelity() > 1.0 - 1e-6);
}

#[test]
fn window_sweep_trends() {
    let p = LinkParameters::delayed_choice();
    let windows = [3.0, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0];
    let sweep =
        window_sweep(&p, &windows, SweepSettings { attempt_rate_hz: 6.0e4, measurement_time_s: 3600.0 }).unwrap();
    for w in sweep.points.windows(2) {
        assert!(w[1].fidelity <= w[0].fidelity + 1e-12);
        assert!(w[1].rate_hz > w[0].rate_hz);
        assert!(w[1].snr.value() < w[0].snr.value());
    }
    let empty = window_sweep(&p, &[], SweepSettings { attempt_rate_hz: 1.0, measurement_time_s: 1.0 }).unwrap();
    assert_eq!(empty.to_csv(), "window_ns,fidelity,fidelity_err,rate_hz,snr\n");
}

#[test]
fn snr_without_background_is_unbounded() {
    assert!(snr(&clean(0.1, 1e-5)).is_unbounded());
    assert!(!snr(&LinkParameters::heralded()).is_unbounded());
}

#[test]
fn invalid_parameters_are_rejected() {
    let mut p = LinkParameters::heralded();
    p.alpha.delft = 1.5;
    assert!(simulate(&p).is_err());
    let mut p = LinkParameters::heralded();
    p.window_ns = -1.0;
    assert!(simulate(&p).is_err());
}

#[test]
fn psb_filter_never_hurts() {
    for p in [LinkParameters::delayed_choice(), LinkParameters::heralded()] {
        let raw = heralded_state(&p, 0.0).unwrap();
        let filtered = psb_false_herald_filter(&p, 0.0).unwrap();
        assert!(filtered.mean_fidelity() >= raw.mean_fidelity() - 1e-12);
        assert!(filtered.success_probability <= raw.success_probability + 1e-18);
    }
}

fn random_parameters<R: Rng>(rng: &mut R) -> LinkParameters {
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    LinkParameters {
        detection_probability: PerNode::new(u(4e-6, 2e-5), u(4e-6, 2e-5)),
        alpha: PerNode::new(u(0.05, 0.3), u(0.05, 0.3)),
        background_hz: PerDetector::new(u(0.0, 60.0), u(0.0, 60.0)),
        double_excitation: PerNode::new(u(0.0, 0.12), u(0.0, 0.12)),
        phase_noise_std_deg: u(0.0, 50.0),
        dephasing: PerNode::new(u(0.0, 0.08), u(0.0, 0.08)),
        spectral_diffusion_fwhm_mhz: u(0.0, 25.0),
        mode_overlap: u(0.85, 1.0),
        window_ns: u(5.0, 25.0),
        reference_window_ns: 15.0,
        rabi_angle_deg: u(120.0, 180.0),
        ionization: PerNode::new(u(0.0, 0.08), u(0.0, 0.08)),
        psb_efficiency: PerNode::new(u(0.0, 0.3), u(0.0, 0.3)),
        decay_ns: 12.0,
        readout_fidelity: PerNode::both(0.95),
    }
}

#[test]
fn monte_carlo_agrees_with_enumeration_on_random_sets() {
    let seeds = SeedTree::new(2024);
    let mut params = seeds.rng("parameters");
    for i in 0..24 {
        let p = random_parameters(&mut params);
        let exact = simulate(&p).unwrap();
        let mut rng = seeds.indexed("mc", i).rng("samples");
        let mc = monte_carlo_heralded(&p, 0.0, true, 200_000, &mut rng).unwrap();
        for (d, (b, m)) in exact.branches.iter().zip(&mc).enumerate() {
            let (f, e) = (b.fidelity, m.fidelity);
            assert!((f - e).abs() <= 3.0 * m.fidelity_err, "set {i} det {d}: {f} vs {e} ± {}", m.fidelity_err);
            let (pe, pm) = (b.probability, m.probability);
            assert!(
                (pe - pm).abs() <= 3.0 * m.probability_err,
                "set {i} det {d}: p {pe} vs {pm} ± {}",
                m.probability_err
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_parameter_states_are_valid(seed in any::<u64>()) {
        let p = random_parameters(&mut SeedTree::new(seed).rng("p"));
        let out = simulate(&p).unwrap();
        for b in &out.branches {
            b.state.validate(STATE_TOLERANCE).unwrap();
            prop_assert!((0.0..=1.0).contains(&b.fidelity));
        }
        prop_assert!(out.success_probability > 0.0 && out.success_probability < 1e-3);
    }

    #[test]
    fn fidelity_falls_with_each_imperfection(seed in any::<u64>(), step in 0.05f64..0.5) {
        let base = random_parameters(&mut SeedTree::new(seed).rng("p"));
        let f0 = simulate(&base).unwrap().mean_fidelity();
        let worse: Vec<LinkParameters> = vec![
            LinkParameters { phase_noise_std_deg: base.phase_noise_std_deg + 40.0 * step, ..base.clone() },
            LinkParameters { dephasing: PerNode::new(base.dephasing.delft + 0.2 * step, base.dephasing.the_hague), ..base.clone() },
            LinkParameters { background_hz: PerDetector::new(base.background_hz.one + 100.0 * step, base.background_hz.two), ..base.clone() },
            LinkParameters { spectral_diffusion_fwhm_mhz: base.spectral_diffusion_fwhm_mhz + 20.0 * step, ..base.clone() },
            LinkParameters { ionization: PerNode::new(base.ionization.delft, base.ionization.the_hague + 0.1 * step), ..base.clone() },
            LinkParameters { mode_overlap: base.mode_overlap * (1.0 - 0.2 * step), ..base.clone() },
        ];
        for (k, q) in worse.iter().enumerate() {
            let f = simulate(q).unwrap().mean_fidelity();
            prop_assert!(f < f0 + 1e-12, "imperfection {k}: {f} > {f0}");
        }
    }
}
