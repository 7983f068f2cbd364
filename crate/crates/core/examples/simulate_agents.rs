//! Compares the Monte Carlo cost of agents driven by the optimal feedback
//! with the value function `u(x0, y0, 0)` from the PDE solve.

use corrupt_mfg::agents::{simulate, AgentEnsemble, ControlMode, SimConfig};
use corrupt_mfg::{solve_mfg, Grid, ModelParams, ScalarField, SolverConfig, TimeGrid};

fn main() -> corrupt_mfg::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let n_space = args.next().unwrap_or(33.0) as usize;
    let nt = args.next().unwrap_or(64.0) as usize;
    let dt_sim = args.next().unwrap_or(1e-3);
    let n_agents = args.next().unwrap_or(1e4) as usize;

    let params = ModelParams::default();
    let grid = Grid::unit_square(n_space, n_space)?;
    let time = TimeGrid::new(params.horizon, nt)?;
    let m0 = ScalarField::from_fn(grid, |x, y| (0.5 * std::f64::consts::PI * x).cos() * (1.0 + 0.3 * (std::f64::consts::PI * y).cos()));
    let ut = ScalarField::from_fn(grid, |x, y| params.psi(x, y));
    let sol = solve_mfg(&m0, &ut, &params, time, &SolverConfig::default())?;
    let (x0, y0) = (0.3, 0.5);
    let value = sol.u.interpolate(x0, y0, 0.0);

    let cfg = SimConfig { n_agents, dt_sim, control_mode: ControlMode::Feedback, ..SimConfig::default() };
    let init = AgentEnsemble::at_point(n_agents, x0, y0, cfg.seed);
    let out = simulate(&init, Some(&sol.u), Some(&sol.m), &params, &cfg, time)?;
    let z = (out.mean_cost - value) / out.std_error;
    println!("grid {n_space}x{n_space}x{nt}, dt_sim {:.2e}, {n_agents} agents", out.dt_used);
    println!("u(x0, y0, 0)      = {value:.6}");
    println!("Monte Carlo mean  = {:.6} +- {:.6}", out.mean_cost, out.std_error);
    println!("difference        = {:+.3} standard errors", z);
    println!("absorbed fraction = {:.4}", 1.0 - out.ensemble.alive_fraction());
    Ok(())
}
