//! Kernel density of simulated agents against the Fokker-Planck density.

use corrupt_mfg::agents::{empirical_density, simulate, AgentEnsemble, ControlMode, SimConfig};
use corrupt_mfg::grid::integrate_space;
use corrupt_mfg::{solve_mfg, Grid, ModelParams, ScalarField, SolverConfig, TimeGrid};

fn main() -> corrupt_mfg::Result<()> {
    let params = ModelParams::default();
    let grid = Grid::unit_square(33, 33)?;
    let time = TimeGrid::new(params.horizon, 65)?;
    let m0 = ScalarField::from_fn(grid, |x, y| (0.5 * std::f64::consts::PI * x).cos() * (1.0 + 0.3 * (std::f64::consts::PI * y).cos()));
    let mass0 = integrate_space(&m0)?;
    let m0 = m0.scaled(1.0 / mass0);
    let ut = ScalarField::from_fn(grid, |x, y| params.psi(x, y));
    let sol = solve_mfg(&m0, &ut, &params, time, &SolverConfig::default())?;

    let cfg = SimConfig { n_agents: 20_000, control_mode: ControlMode::Feedback, ..SimConfig::default() };
    let init = AgentEnsemble::sample_from(&m0, cfg.n_agents, cfg.seed)?;
    let out = simulate(&init, Some(&sol.u), Some(&sol.m), &params, &cfg, time)?;
    let kde = empirical_density(&out.history, &grid, 0.06)?;

    println!("{:>6} {:>10} {:>10} {:>10}", "t", "PDE mass", "alive", "L1 gap");
    for n in (0..time.nt()).step_by(8) {
        let pde = sol.m.level_field(n);
        let emp = kde.level_field(n);
        let gap = ScalarField::new(grid, pde.sub(&emp)?.values().iter().map(|v| v.abs()).collect())?;
        println!(
            "{:>6.3} {:>10.4} {:>10.4} {:>10.4}",
            time.t(n),
            integrate_space(&pde)?,
            out.history.alive_fraction(n),
            integrate_space(&gap)?
        );
    }
    Ok(())
}
