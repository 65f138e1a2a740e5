use resnet_eft::config::{Axis, Check, ExperimentConfig};
use resnet_eft::diagnostics::{
    bridge_check, hierarchy_check_orders, hierarchy_empirical, k1_localization, linear_v4_phi_first_step,
    residual_rv4, run_experiment, run_sweep, theory, u1_sources, SweepSpec, Theory,
};
use resnet_eft::ensemble::{run_ensemble, Ensemble};
use resnet_eft::{Activation, Error, KernelMatrix};

fn tiny(width: usize, depth: usize, members: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_baseline();
    cfg.network.width = width;
    cfg.network.depth = depth;
    cfg.ensemble.members = members;
    cfg.ensemble.checkpoints = resnet_eft::config::CheckpointSpec::Layers((0..=depth).collect());
    cfg.flow.quadrature.order = 128;
    cfg
}

fn two_points(cfg: &mut ExperimentConfig) {
    cfg.network.inputs = 2;
    cfg.diagnostics.kernel_components = vec![[0, 0], [0, 1]];
    cfg.diagnostics.pair_components = vec![[0, 0, 0, 0], [0, 1, 0, 1], [0, 0, 1, 1]];
}

fn simulate(cfg: &ExperimentConfig) -> (Ensemble, Theory) {
    let ens = run_ensemble(&cfg.network().unwrap(), &cfg.run_options().unwrap()).unwrap();
    (ens, theory(cfg).unwrap())
}

#[test]
fn v4_equation_residual_is_consistent_with_zero_early() {
    for act in [Activation::Tanh, Activation::Linear] {
        let mut cfg = tiny(16, 2, 20_000);
        cfg.network.activation = act;
        let (ens, th) = simulate(&cfg);
        let r = residual_rv4(&ens, &th.solution.k0, &th.model, Some(&[0]), &cfg.diagnostics.pair_components).unwrap();
        assert_eq!(r.rows.len(), cfg.diagnostics.pair_components.len());
        assert!(r.within("rv4", 4.0), "{act:?}: {:?}", r.rows);
    }
}

#[test]
fn v4_equation_residual_needs_unit_alpha_and_adjacent_checkpoints() {
    let mut cfg = tiny(8, 4, 128);
    cfg.ensemble.checkpoints = resnet_eft::config::CheckpointSpec::Layers(vec![0, 2, 4]);
    let (ens, th) = simulate(&cfg);
    let err = residual_rv4(&ens, &th.solution.k0, &th.model, Some(&[2]), &[[0, 0, 0, 0]]).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    cfg.network.alpha = 0.9;
    let (ens, th) = simulate(&cfg);
    let err = residual_rv4(&ens, &th.solution.k0, &th.model, None, &[[0, 0, 0, 0]]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn exact_bridge_identity_holds_within_errors() {
    for (alpha, eps) in [(1.0, 0.3), (0.0, 1.0), (0.8, 0.5)] {
        let mut cfg = tiny(16, 3, 20_000);
        two_points(&mut cfg);
        cfg.network.alpha = alpha;
        cfg.network.eps = eps;
        cfg.ensemble.heavy = true;
        let (ens, _) = simulate(&cfg);
        let r = bridge_check(&ens, &cfg.diagnostics.pair_components).unwrap();
        assert_eq!(r.rows_for("bridge_exact").count(), 3 * 3);
        assert!(
            r.within("bridge_exact", 4.0),
            "alpha {alpha}, eps {eps}: max |z| {:?}",
            r.max_abs_z("bridge_exact")
        );
    }
}

#[test]
fn bridge_needs_heavy_mode() {
    let cfg = tiny(8, 2, 128);
    let (ens, _) = simulate(&cfg);
    assert!(matches!(bridge_check(&ens, &[[0, 0, 0, 0]]), Err(Error::Unavailable(..))));
}

#[test]
fn leading_order_bridge_gap_shrinks_with_width() {
    // MLP limit, where the gap V4^(G) - V4^(φ) - Ω(Ḡ) after a few layers is O(1/n)
    let gap = |width: usize| {
        let mut cfg = tiny(width, 3, 40_000);
        two_points(&mut cfg);
        cfg.network.alpha = 0.0;
        cfg.network.eps = 1.0;
        cfg.ensemble.heavy = true;
        let (ens, _) = simulate(&cfg);
        let r = bridge_check(&ens, &[[0, 0, 0, 0]]).unwrap();
        let row = r.rows_for("bridge_leading").find(|row| row.layer == 3).unwrap().clone();
        (row.estimate, row.std_error().unwrap())
    };
    let (g8, se8) = gap(8);
    let (g32, se32) = gap(32);
    assert!(g8.abs() > 4.0 * se8, "gap at n=8 not resolved: {g8} +- {se8}");
    let ratio = g8 / g32;
    assert!((2.0..8.0).contains(&ratio), "ratio {ratio} ({g8} +- {se8}, {g32} +- {se32})");
}

#[test]
fn linear_first_step_neuron_covariance_matches_its_closed_form() {
    let mut cfg = tiny(16, 1, 40_000);
    two_points(&mut cfg);
    cfg.network.activation = Activation::Linear;
    cfg.network.alpha = 0.7;
    cfg.network.eps = 0.6;
    cfg.ensemble.heavy = true;
    let (ens, _) = simulate(&cfg);
    let net = cfg.network().unwrap();
    let expected = linear_v4_phi_first_step(&net);
    let got = ens.empirical_v4_phi(1).unwrap();
    let zero = ens.empirical_v4_phi(0).unwrap();
    let p = ens.pairs().len();
    for i in 0..p {
        for j in 0..p {
            let (v, se, e) = (got.value.matrix()[(i, j)], got.se[(i, j)], expected.matrix()[(i, j)]);
            assert!((v - e).abs() <= 4.0 * se, "({i},{j}): {v} vs {e} (se {se})");
            let (v0, se0) = (zero.value.matrix()[(i, j)], zero.se[(i, j)]);
            assert!(v0.abs() <= 4.0 * se0, "layer 0 ({i},{j}): {v0} (se {se0})");
        }
    }
    // nonzero: the one-layer neuron covariance is not the vanishing layer-0 one
    assert!(expected.matrix().amax() > 0.1);
}

#[test]
fn exact_source_vanishes_at_initialization_and_reference_tracks_k1() {
    let cfg = tiny(16, 10, 20_000);
    let (ens, th) = simulate(&cfg);
    let kc = &cfg.diagnostics.kernel_components;
    let u1 = u1_sources(&ens, &th.solution.k0, &th.solution.v4, &th.solution.k1, &th.model, kc).unwrap();
    for row in u1.rows_for("u1_exact").filter(|r| r.layer == 0) {
        assert!(row.estimate.abs() <= 4.0 * row.std_error().unwrap(), "{row:?}");
    }
    // the model source at layer 0 is the tadpole D²Q:Ω(K0)/(2 C_W), which is not zero
    let model0 = u1.rows_for("u1_model").find(|r| r.layer == 0).unwrap();
    assert!(model0.estimate.abs() > 1e-3);
    let k1 = k1_localization(&ens, &th.solution.k0, &th.solution.k1, &th.model, kc).unwrap();
    assert!(k1.within("u1ex_minus_mic", 4.0), "{:?}", k1.max_abs_z("u1ex_minus_mic"));
}

#[test]
fn sources_normalized_by_a_zero_weight_variance_are_rejected() {
    let mut cfg = tiny(8, 2, 128);
    cfg.network.cw = 0.0;
    cfg.network.cb = 0.5;
    let (ens, th) = simulate(&cfg);
    let err = u1_sources(&ens, &th.solution.k0, &th.solution.v4, &th.solution.k1, &th.model, &[[0, 1]]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn mismatched_theory_grid_is_a_data_error() {
    let cfg = tiny(8, 4, 128);
    let (ens, _) = simulate(&cfg);
    let mut other = cfg.clone();
    other.network.eps = 0.2;
    let th = theory(&other).unwrap();
    let err = k1_localization(&ens, &th.solution.k0, &th.solution.k1, &th.model, &[[0, 1]]).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn measured_moments_match_the_gaussian_closure_at_initialization() {
    let mut cfg = tiny(16, 2, 20_000);
    cfg.ensemble.hierarchy = true;
    let (ens, th) = simulate(&cfg);
    let r = hierarchy_empirical(&ens, &th.solution.k0, &th.model, &hierarchy_check_orders(), &[[0, 0], [0, 1]]).unwrap();
    for (p, q) in hierarchy_check_orders() {
        let name = format!("closure_defect_p{p}q{q}");
        for row in r.rows_for(&name).filter(|r| r.layer == 0) {
            assert!(row.estimate.abs() <= 4.0 * row.std_error().unwrap(), "{name}: {row:?}");
        }
        assert!(r.rows_for(&format!("empirical_residual_p{p}q{q}")).count() > 0);
    }
}

#[test]
fn empirical_hierarchy_requires_tracking_and_unit_alpha() {
    let mut cfg = tiny(8, 2, 128);
    let (ens, th) = simulate(&cfg);
    let err = hierarchy_empirical(&ens, &th.solution.k0, &th.model, &[(0, 0)], &[[0, 1]]).unwrap_err();
    assert!(matches!(err, Error::Unavailable(..)));
    cfg.ensemble.hierarchy = true;
    let (ens, th) = simulate(&cfg);
    let err = hierarchy_empirical(&ens, &th.solution.k0, &th.model, &[(3, 0)], &[[0, 1]]).unwrap_err();
    assert!(matches!(err, Error::UnsupportedOrder { p: 3, q: 0, .. }));
    cfg.network.alpha = 0.5;
    let (ens, th) = simulate(&cfg);
    let err = hierarchy_empirical(&ens, &th.solution.k0, &th.model, &[(0, 0)], &[[0, 1]]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn single_point_sweep_reproduces_the_direct_run() {
    let mut cfg = tiny(8, 6, 256);
    cfg.diagnostics.checks = vec![Check::SigmaSources, Check::V4Relative, Check::K1Localization];
    let spec = SweepSpec::new(Axis::Eps, vec![cfg.network.eps], cfg.clone()).unwrap();
    let result = run_sweep(&spec);
    let (reports, _) = result.points[0].outcome.as_ref().unwrap();
    let (_, _, direct) = run_experiment(&cfg).unwrap();
    assert_eq!(reports, &direct);
}

#[test]
fn failing_sweep_points_do_not_stop_the_sweep() {
    let cfg = tiny(8, 4, 128);
    let spec = SweepSpec::new(Axis::Width, vec![4.0, 2.5, 8.0], cfg).unwrap();
    let result = run_sweep(&spec);
    assert!(result.points[0].outcome.is_ok());
    assert!(matches!(result.points[1].outcome, Err(Error::Config(_))));
    assert!(result.points[2].outcome.is_ok());
}

#[test]
fn width_sweep_fits_the_deviation_exponent() {
    let mut cfg = tiny(8, 5, 20_000);
    cfg.diagnostics.checks = vec![Check::V4Relative];
    let spec = SweepSpec::new(Axis::Width, vec![4.0, 8.0, 16.0], cfg).unwrap();
    let fit = run_sweep(&spec).fitted_exponent().unwrap();
    assert!((-1.6..-0.5).contains(&fit.exponent), "{fit:?}");
}

#[test]
fn linear_k1_source_terms_vanish() {
    let mut cfg = tiny(8, 3, 256);
    cfg.network.activation = Activation::Linear;
    let th = theory(&cfg).unwrap();
    let zero = KernelMatrix::zeros(4);
    for k1 in th.solution.k1.states() {
        assert_eq!(k1, &zero);
    }
}
