//! Solves the coupled system on the 33x33x64 grid with weak mean-field
//! coupling and prints the Picard residuals and the mass history.

use corrupt_mfg::{solve_mfg, Grid, ModelParams, ScalarField, SolverConfig, TimeGrid};

fn main() -> corrupt_mfg::Result<()> {
    let params = ModelParams { g_a1: 1e-2, g_b1: 1e-2, ..ModelParams::default() };
    let grid = Grid::unit_square(33, 33)?;
    let time = TimeGrid::new(params.horizon, 64)?;
    let m0 = ScalarField::from_fn(grid, |x, y| (0.5 * std::f64::consts::PI * x).cos() * (1.0 + 0.3 * (std::f64::consts::PI * y).cos()));
    let ut = ScalarField::from_fn(grid, |x, y| params.psi(x, y));
    let sol = solve_mfg(&m0, &ut, &params, time, &SolverConfig::default())?;

    println!("{:>4} {:>12} {:>8}", "iter", "residual", "ratio");
    for (k, r) in sol.residual_history.iter().enumerate() {
        let ratio = if k > 0 { format!("{:.3}", r / sol.residual_history[k - 1]) } else { String::new() };
        println!("{:>4} {:>12.4e} {:>8}", k + 1, r, ratio);
    }
    println!("converged: {}", sol.converged);
    let mass = sol.mass_history();
    println!("mass at t = 0: {:.6}, at t = T: {:.6}", mass[0], mass[mass.len() - 1]);
    println!("u(0.3, 0.5, 0) = {:.6}", sol.u.interpolate(0.3, 0.5, 0.0));
    Ok(())
}
