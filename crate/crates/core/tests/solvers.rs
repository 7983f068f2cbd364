use corrupt_mfg::model::Income;
use corrupt_mfg::solvers::{mass_history, solve_fp_forward, solve_fp_forward_with, solve_hjb_backward, FpBoundary, FpOperator};
use corrupt_mfg::{solve_mfg, Grid, ModelParams, ScalarField, SolverConfig, SpaceTimeField, TimeGrid};
use proptest::prelude::*;

fn bump(grid: Grid, cx: f64, cy: f64, w: f64) -> ScalarField {
    ScalarField::from_fn(grid, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / w).exp())
}

fn psi_field(grid: Grid, p: &ModelParams) -> ScalarField {
    ScalarField::from_fn(grid, |x, y| p.psi(x, y))
}

#[test]
fn zero_data_gives_zero_value_function() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(1.0, 17).unwrap();
    let p = ModelParams { income: Income::zero(), g_a1: 0.0, g_b1: 0.0, psi: 0.0.into(), ..ModelParams::default() };
    let u = solve_hjb_backward(&ScalarField::zeros(grid), &SpaceTimeField::zeros(grid, time), &p).unwrap();
    assert_eq!(u.max_abs(), 0.0);
}

#[test]
fn boundary_values_are_imposed_exactly() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(2.0, 33).unwrap();
    let p = ModelParams::default();
    let sol = solve_mfg(&bump(grid, 0.4, 0.5, 0.05), &psi_field(grid, &p), &p, time, &SolverConfig::default()).unwrap();
    for n in 0..time.nt() {
        for j in 0..grid.ny() {
            let k = grid.idx(grid.nx() - 1, j);
            assert_eq!(sol.u.level(n)[k], p.psi(1.0, grid.y(j)));
            if n > 0 {
                assert_eq!(sol.m.level(n)[k], 0.0);
            }
        }
    }
}

#[test]
fn higher_income_never_raises_the_cost() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(2.0, 33).unwrap();
    let low = ModelParams::default();
    let high = ModelParams { income: Income::Standard { p0: 0.5, q0: 0.6, r: 0.1 }, ..ModelParams::default() };
    let m = SpaceTimeField::broadcast(&bump(grid, 0.4, 0.5, 0.05), time);
    let u_low = solve_hjb_backward(&psi_field(grid, &low), &m, &low).unwrap();
    let u_high = solve_hjb_backward(&psi_field(grid, &high), &m, &high).unwrap();
    for (h, l) in u_high.values().iter().zip(u_low.values()) {
        assert!(*h <= l + 1e-8, "{h} > {l}");
    }
}

/// `max |u_t + s/2 lap u - k1/2 u_x^2 - k2/2 u_y^2 - c + g|` over
/// `[0.25, 0.75]^2 x [0, T - 0.25]`, with `m = 0` so the coupling reduces to
/// `g(x, y)`. The window stays clear of the layers where `Psi` meets the
/// zero-flux condition.
fn hjb_residual(n_space: usize, nt: usize) -> f64 {
    let grid = Grid::unit_square(n_space, n_space).unwrap();
    let time = TimeGrid::new(1.0, nt).unwrap();
    let p = ModelParams::default();
    let u = solve_hjb_backward(&psi_field(grid, &p), &SpaceTimeField::zeros(grid, time), &p).unwrap();
    let (h, dt) = (grid.hx(), time.dt());
    let s = 0.2;
    let mut worst = 0.0_f64;
    let inside = |s: f64| (0.25..=0.75).contains(&s);
    for n in (0..nt - 1).filter(|&n| time.t(n + 1) <= 0.75 + 1e-12) {
        let (now, next) = (u.level(n), u.level(n + 1));
        for j in (1..grid.ny() - 1).filter(|&j| inside(grid.y(j))) {
            for i in (1..grid.nx() - 1).filter(|&i| inside(grid.x(i))) {
                let k = grid.idx(i, j);
                let (x, y) = (grid.x(i), grid.y(j));
                let ux = (next[k + 1] - next[k - 1]) / (2.0 * h);
                let uy = (next[k + grid.nx()] - next[k - grid.nx()]) / (2.0 * h);
                let lap = (now[k + 1] + now[k - 1] + now[k + grid.nx()] + now[k - grid.nx()] - 4.0 * now[k]) / (h * h);
                let (p1, p2) = (p.phi1(x, y), p.phi2(x, y));
                let r = (next[k] - now[k]) / dt + 0.5 * s * lap - 0.5 * p1 * p1 * ux * ux - 0.5 * p2 * p2 * uy * uy - p.income(x, y, time.t(n + 1))
                    + p.g(x, y);
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

#[test]
fn hjb_residual_shrinks_under_refinement() {
    let r: Vec<f64> = [(9, 9), (17, 33), (33, 129)].iter().map(|&(n, nt)| hjb_residual(n, nt)).collect();
    assert!(r[1] < 0.5 * r[0] && r[2] < 0.5 * r[1], "{r:?}");
}

#[test]
fn fp_from_zero_stays_zero() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(1.0, 17).unwrap();
    let p = ModelParams::default();
    let u = SpaceTimeField::from_fn(grid, time, |x, y, t| x * y + t);
    let m = solve_fp_forward(&ScalarField::zeros(grid), &u, &p).unwrap();
    assert_eq!(m.max_abs(), 0.0);
}

#[test]
fn fp_mass_with_constant_value_function_is_conserved() {
    let grid = Grid::unit_square(33, 33).unwrap();
    let time = TimeGrid::new(2.0, 64).unwrap();
    let p = ModelParams::default();
    let u = SpaceTimeField::from_fn(grid, time, |_, _, _| 3.0);
    let mass = mass_history(&solve_fp_forward_with(&bump(grid, 0.5, 0.5, 0.02), &u, &p, FpBoundary::Reflecting).unwrap());
    for m in &mass {
        assert!((m - mass[0]).abs() <= 1e-6 * mass[0]);
    }
}

#[test]
fn absorbing_mass_strictly_decreases_for_bump_near_exit() {
    let grid = Grid::unit_square(33, 33).unwrap();
    let time = TimeGrid::new(2.0, 64).unwrap();
    let p = ModelParams::default();
    let u = solve_hjb_backward(&psi_field(grid, &p), &SpaceTimeField::zeros(grid, time), &p).unwrap();
    let mass = mass_history(&solve_fp_forward(&bump(grid, 0.8, 0.5, 0.02), &u, &p).unwrap());
    assert!(mass.windows(2).all(|w| w[1] < w[0]), "{mass:?}");
}

#[test]
fn decoupled_system_converges_in_at_most_two_iterations() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(2.0, 33).unwrap();
    let p = ModelParams { g_a1: 0.0, g_b1: 0.0, ..ModelParams::default() };
    let cfg = SolverConfig { damping: 1.0, ..SolverConfig::default() };
    let sol = solve_mfg(&bump(grid, 0.4, 0.5, 0.05), &psi_field(grid, &p), &p, time, &cfg).unwrap();
    assert!(sol.converged && sol.iterations <= 2, "{:?}", sol.residual_history);
}

#[test]
fn empty_population_fixed_point() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(2.0, 33).unwrap();
    let p = ModelParams::default();
    let sol = solve_mfg(&ScalarField::zeros(grid), &psi_field(grid, &p), &p, time, &SolverConfig::default()).unwrap();
    let direct = solve_hjb_backward(&psi_field(grid, &p), &SpaceTimeField::zeros(grid, time), &p).unwrap();
    assert!(sol.converged);
    assert_eq!(sol.m.max_abs(), 0.0);
    assert!(sol.u.sup_distance(&direct) <= 1e-12);
}

#[test]
fn weak_coupling_contracts_geometrically() {
    let grid = Grid::unit_square(17, 17).unwrap();
    let time = TimeGrid::new(2.0, 33).unwrap();
    let p = ModelParams { g_a1: 1e-2, g_b1: 1e-2, ..ModelParams::default() };
    let sol = solve_mfg(&bump(grid, 0.4, 0.5, 0.05), &psi_field(grid, &p), &p, time, &SolverConfig::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.residual_history.windows(2).skip(1).all(|w| w[1] < 0.9 * w[0]), "{:?}", sol.residual_history);
}

#[test]
fn negative_initial_density_is_rejected() {
    let grid = Grid::unit_square(9, 9).unwrap();
    let time = TimeGrid::new(1.0, 9).unwrap();
    let p = ModelParams::default();
    let m0 = ScalarField::from_fn(grid, |x, _| x - 0.5);
    assert!(solve_mfg(&m0, &psi_field(grid, &p), &p, time, &SolverConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fp_stays_nonnegative_and_reflecting_conserves(cx in 0.1f64..0.9, cy in 0.1f64..0.9, w in 0.005f64..0.1, slope in -3.0f64..3.0) {
        let grid = Grid::unit_square(17, 17).unwrap();
        let time = TimeGrid::new(1.0, 17).unwrap();
        let p = ModelParams::default();
        let u = SpaceTimeField::from_fn(grid, time, |x, y, t| slope * (x * x - y) * (1.0 + t));
        let m0 = bump(grid, cx, cy, w);
        let top = m0.max_abs();
        for boundary in [FpBoundary::Reflecting, FpBoundary::Absorbing] {
            let m = solve_fp_forward_with(&m0, &u, &p, boundary).unwrap();
            prop_assert!(m.min() >= -1e-12 * top);
            let mass = mass_history(&m);
            match boundary {
                FpBoundary::Reflecting => prop_assert!(mass.iter().all(|v| (v - mass[0]).abs() <= 1e-10 * mass[0])),
                FpBoundary::Absorbing => prop_assert!(mass.windows(2).all(|v| v[1] <= v[0] + 1e-8)),
            }
        }
    }

    #[test]
    fn fp_transpose_is_exact(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let grid = Grid::unit_square(13, 13).unwrap();
        let time = TimeGrid::new(1.0, 9).unwrap();
        let p = ModelParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: f64 = rng.random_range(-2.0..2.0);
        let u = SpaceTimeField::from_fn(grid, time, |x, y, t| a * (x * y + t * x));
        let op = FpOperator::new(&u, &p, FpBoundary::Absorbing).unwrap();
        let v: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = op.apply(&v).iter().zip(&w).map(|(x, y)| x * y).sum();
        let rhs: f64 = v.iter().zip(op.apply_transpose(&w)).map(|(x, y)| x * y).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }
}
