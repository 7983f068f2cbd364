use corrupt_mfg::grid::h1_norm;
use corrupt_mfg::retro::{
    add_noise, default_initial_density, lambda_of_delta, reconstruct, relative_l2, stability_experiment, tikhonov_initial_density, Alpha,
    ErrorNorms, GroundTruth, NoisySnapshot, RetroConfig,
};
use corrupt_mfg::solvers::{FpBoundary, FpOperator};
use corrupt_mfg::{Grid, ModelParams, ScalarField, SolverConfig, SpaceTimeField, TimeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn setup() -> (ModelParams, Grid, TimeGrid, GroundTruth) {
    let p = ModelParams::default();
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::retrospective(2.0, 33).unwrap();
    let m0 = default_initial_density(grid);
    let truth = GroundTruth::generate(&p, grid, time, &|x, y| m0.interpolate(x, y), &SolverConfig::default(), false).unwrap();
    (p, grid, time, truth)
}

fn exact_data(truth: &GroundTruth) -> NoisySnapshot {
    let (u_t, m_t) = truth.terminal();
    NoisySnapshot::new(&u_t, &m_t, 0.0, 0).unwrap()
}

#[test]
fn forward_map_transpose_on_unit_vectors() {
    let (p, grid, _, truth) = setup();
    let op = FpOperator::new(&truth.u, &p, FpBoundary::Absorbing).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let i = rng.random_range(0..grid.len());
        let w: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut e = vec![0.0; grid.len()];
        e[i] = 1.0;
        let lhs: f64 = op.apply(&e).iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs = op.apply_transpose(&w)[i];
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300), "node {i}: {lhs} vs {rhs}");
    }
}

#[test]
fn exact_data_recovers_the_initial_density() {
    let (p, _, time, truth) = setup();
    let cfg = RetroConfig { tikhonov_alpha: Alpha::Value(1e-8), ..RetroConfig::default() };
    let rec = reconstruct(&exact_data(&truth), &p, time, &cfg, None).unwrap();
    let err = relative_l2(&rec.m0, &truth.m0);
    assert!(err <= 1e-2, "{err}");
    assert!(rec.cg.iter().all(|c| c.iterations > 0));
}

#[test]
fn zero_density_data_gives_zero_reconstruction() {
    let (p, grid, time, _) = setup();
    let data = NoisySnapshot { u_t_noisy: ScalarField::from_fn(grid, |x, y| p.psi(x, y)), m_t_noisy: ScalarField::zeros(grid), delta: 0.0, seed: 0 };
    let rec = reconstruct(&data, &p, time, &RetroConfig { tikhonov_alpha: Alpha::Value(1e-3), ..RetroConfig::default() }, None).unwrap();
    assert!(rec.solution.m.max_abs() <= 1e-8);
}

#[test]
fn smaller_regularization_is_more_accurate_on_exact_data() {
    let (p, _, _, truth) = setup();
    let (_, m_t) = truth.terminal();
    let op = FpOperator::new(&truth.u, &p, FpBoundary::Absorbing).unwrap();
    let errs: Vec<f64> = [1e-2, 1e-4, 1e-6, 1e-8]
        .iter()
        .map(|&a| relative_l2(&tikhonov_initial_density(&op, &m_t, a, 2000, 1e-12).unwrap().0, &truth.m0))
        .collect();
    // monotone until the discretization floor
    let floor = 2e-3;
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] || w[1] <= floor, "{errs:?}");
    }
}

#[test]
fn window_norms_are_bounded_by_full_norms_and_shrink_toward_t() {
    let (p, _, time, truth) = setup();
    let (u_t, m_t) = truth.terminal();
    let data = NoisySnapshot::new(&u_t, &m_t, 1e-2, 3).unwrap();
    let rec = reconstruct(&data, &p, time, &RetroConfig::default(), None).unwrap();
    let (u, m) = (&rec.solution.u, &rec.solution.m);
    let full = ErrorNorms::between(u, &truth.u, m, &truth.m, 0.0).unwrap();
    let early = ErrorNorms::between(u, &truth.u, m, &truth.m, 1.25).unwrap();
    let late = ErrorNorms::between(u, &truth.u, m, &truth.m, 1.75).unwrap();
    assert!(early.total() <= full.total());
    assert!(late.total() <= early.total());
    assert!(rec.u_c2.is_finite() && rec.m_c1.is_finite());
}

#[test]
fn reconstruction_does_not_depend_on_the_initial_guess() {
    let (p, _, time, truth) = setup();
    let data = exact_data(&truth);
    let cfg = RetroConfig { tikhonov_alpha: Alpha::Value(1e-8), outer_iters: 12, ..RetroConfig::default() };
    let a = reconstruct(&data, &p, time, &cfg, None).unwrap();
    let guess = SpaceTimeField::from_fn(*truth.m.grid(), time, |x, y, _| 0.5 * (1.0 - x) * (1.0 + y));
    let b = reconstruct(&data, &p, time, &cfg, Some(&guess)).unwrap();
    let between = ErrorNorms::between(&a.solution.u, &b.solution.u, &a.solution.m, &b.solution.m, cfg.gamma).unwrap().total();
    let own = ErrorNorms::between(&a.solution.u, &truth.u, &a.solution.m, &truth.m, cfg.gamma).unwrap().total();
    assert!(between <= 10.0 * own.max(1e-12), "{between} vs {own}");
}

#[test]
fn noise_sweep_errors_decay() {
    let (p, grid, time, _) = setup();
    let report = stability_experiment(&p, grid, time, &SolverConfig::default(), &RetroConfig::default(), &[1e-1, 1e-2, 1e-3], &[0, 1]).unwrap();
    assert_eq!(report.records.len(), 6);
    assert!(report.records.iter().all(|r| r.failure.is_none() && r.lambda.is_none()));
    let mean = |d: f64| {
        let v: Vec<f64> = report.records.iter().filter(|r| r.delta == d).map(|r| r.window_total).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(1e-2) <= 2.0 * mean(1e-1) && mean(1e-3) <= 2.0 * mean(1e-2));
    assert!(report.fitted_exponent.unwrap() > 0.0);
}

#[test]
fn half_resolution_truth_runs() {
    let p = ModelParams::default();
    let grid = Grid::unit_square(9, 9).unwrap();
    let time = TimeGrid::retrospective(2.0, 17).unwrap();
    let cfg = RetroConfig { half_resolution: true, ..RetroConfig::default() };
    let report = stability_experiment(&p, grid, time, &SolverConfig::default(), &cfg, &[1e-2], &[0]).unwrap();
    let r = &report.records[0];
    assert!(r.failure.is_none() && r.window_total.is_finite() && r.window_total > 0.0);
}

#[test]
fn config_rejects_bad_window() {
    assert!(RetroConfig { gamma: 0.5, ..RetroConfig::default() }.validate(2.0).is_err());
    assert!(RetroConfig { gamma: 2.5, ..RetroConfig::default() }.validate(2.0).is_err());
    assert!(RetroConfig::default().validate(1.0).is_err());
    assert!(RetroConfig::default().validate(2.0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noise_has_the_requested_size(delta in 1e-8f64..1.0, seed in any::<u64>(), a in -2.0f64..2.0) {
        let grid = Grid::unit_square(13, 9).unwrap();
        let f = ScalarField::from_fn(grid, |x, y| a * x * y + (3.0 * y).sin());
        let g = add_noise(&f, delta, seed).unwrap();
        prop_assert!((h1_norm(&g.sub(&f).unwrap()) - delta).abs() <= 1e-12 * delta);
        prop_assert_eq!(g, add_noise(&f, delta, seed).unwrap());
    }

    #[test]
    fn lambda_grows_as_delta_shrinks(k in 1.0f64..14.0, factor in 1.0001f64..10.0) {
        let alpha = 1.0 / (3.0 * 16.0);
        let delta = (-k / alpha).exp();
        let l1 = lambda_of_delta(delta, 2.0, 2.0).unwrap();
        let l2 = lambda_of_delta(delta / factor, 2.0, 2.0).unwrap();
        prop_assert!((l1 - k).abs() <= 1e-9 * k);
        prop_assert!(l2 > l1);
    }
}
