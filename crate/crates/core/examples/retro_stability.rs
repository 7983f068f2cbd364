//! Noise sweep for the retrospective problem on the 33x33x64 grid.

use corrupt_mfg::{
    retro::{stability_experiment, Alpha, RetroConfig},
    Grid, ModelParams, SolverConfig, TimeGrid,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = ModelParams::default();
    let grid = Grid::unit_square(33, 33)?;
    let time = TimeGrid::retrospective(2.0, 64)?;
    let solver = SolverConfig::default();
    let deltas: Vec<f64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|d| d.parse().expect("delta")).collect())
        .unwrap_or_else(|| vec![1e-1, 1e-2, 1e-3, 1e-4]);
    let cfg = RetroConfig::default();
    let started = std::time::Instant::now();
    let report = stability_experiment(&params, grid, time, &solver, &cfg, &deltas, &[0])?;
    println!("{:>8} {:>10} {:>12} {:>12} {:>10} {:>6} {:>8}", "delta", "alpha", "window", "full", "m0 rel", "outer", "cg");
    for r in &report.records {
        let cg: Vec<usize> = r.cg.iter().map(|c| c.iterations).collect();
        println!(
            "{:>8.0e} {:>10.1e} {:>12.4e} {:>12.4e} {:>10.3e} {:>6} {:?} {}",
            r.delta, r.alpha, r.window_total, r.full_total, r.m0_relative_error, r.outer_iterations, cg,
            r.failure.as_deref().unwrap_or("")
        );
    }
    match report.fitted_exponent {
        Some(rho) => println!("fitted exponent {rho:.4}"),
        None => println!("fitted exponent unavailable"),
    }

    let exact = RetroConfig { tikhonov_alpha: Alpha::Value(1e-8), ..cfg };
    let r = stability_experiment(&params, grid, time, &solver, &exact, &[0.0], &[0])?;
    println!("delta = 0, alpha = 1e-8: m0 relative error {:.3e}", r.records[0].m0_relative_error);
    println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
