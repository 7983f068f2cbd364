//! The `corrupt-mfg` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a numerical run fails or does not
//! converge, 2 for usage and configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::agents::{empirical_density, logistic_check, simulate, AgentEnsemble, ControlMode};
use crate::carleman::{random_suite, scan_thresholds, DiagonalOperator, Quadrature, Theorem};
use crate::config::{unix_now, write_atomic, RunConfig, RunManifest};
use crate::error::Error;
use crate::retro::{stability_experiment_with, Alpha, NoisySnapshot, Reconstruction};
use crate::solvers::solve_mfg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CORRUPT_MFG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corrupt-mfg", version, about = "Mean-field-game model of corruption in a hierarchy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the coupled HJB / Fokker-Planck system.
    Solve(ConfigArgs),
    /// Monte Carlo simulation of the agents.
    Simulate(SimulateArgs),
    /// Check the weighted parabolic estimates on a random analytic suite.
    VerifyCarleman(CarlemanArgs),
    /// Noise sweep for the retrospective problem.
    Retro(RetroArgs),
    /// Compare the simulated logistic sub-model with its closed form.
    LogisticCheck(LogisticArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON or TOML configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Overrides `sim.n_agents`.
    #[arg(long)]
    agents: Option<usize>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `zero` or `feedback` (the latter solves the MFG system first).
    #[arg(long)]
    control: Option<String>,
}

#[derive(Debug, Args)]
struct CarlemanArgs {
    /// Which estimate to check: 5.1, 5.2 or 7.1.
    #[arg(long, default_value = "5.1")]
    theorem: Theorem,
    #[arg(long, default_value_t = 20)]
    suite_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    lambda_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    s_list: Vec<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Coefficients `a1 = a2` of the divergence-form operator.
    #[arg(long, default_value_t = 0.1)]
    coefficient: f64,
    /// `sigma1^2 = sigma2^2` used by the gradient-weighted check (`--theorem 7.1`).
    #[arg(long, default_value_t = 0.2)]
    sigma_sq: f64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetroArgs {
    /// JSON or TOML configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001,0.0001")]
    delta_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Lower end of the error window; must lie in (1, T).
    #[arg(long)]
    gamma: Option<f64>,
    /// A positive number or `auto` (`delta^2`).
    #[arg(long)]
    alpha: Option<Alpha>,
    #[arg(long, default_value = "retro_out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct LogisticArgs {
    #[arg(long, default_value_t = 0.5)]
    y0: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_b: f64,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    t_end: f64,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid { .. } | Error::Parse { .. } | Error::Io { .. } | Error::Expression { .. } | Error::Grid(_) | Error::Shape(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_CONFIG;
    }
    let result = match cli.command {
        Command::Solve(a) => solve(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::VerifyCarleman(a) => verify_carleman(a),
        Command::Retro(a) => retro(a),
        Command::LogisticCheck(a) => logistic(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            EXIT_NUMERICAL
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| format!("{THREADS_ENV} must be a positive integer (got `{raw}`)"))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn out_dir(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let body = serde_json::to_vec_pretty(value).map_err(|e| Failure::Numerical(e.to_string()))?;
    Ok(write_atomic(path, &body)?)
}

fn solve(a: ConfigArgs) -> Outcome {
    let started = unix_now();
    let cfg = load(a.config.as_deref())?;
    out_dir(&a.out)?;
    let sol = solve_mfg(&cfg.initial_field()?, &terminal(&cfg)?, &cfg.model, cfg.time()?, &cfg.solver)?;
    sol.u.write_csv(&a.out.join("u.csv"))?;
    sol.m.write_csv(&a.out.join("m.csv"))?;
    let report = json!({
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "converged": sol.converged,
        "mass_history": sol.mass_history(),
    });
    write_json(&a.out.join("convergence.json"), &report)?;
    let files = ["u.csv", "m.csv", "convergence.json"].map(String::from);
    RunManifest::new("solve", cfg.to_value(), None, started).finish(&a.out, &files)?;
    println!("picard iterations {}, final residual {:.3e}", sol.iterations, sol.residual_history.last().copied().unwrap_or(0.0));
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("Picard iteration did not reach {:e} in {} iterations", cfg.solver.picard_tol, sol.iterations)))
    }
}

fn terminal(cfg: &RunConfig) -> crate::Result<crate::ScalarField> {
    Ok(crate::ScalarField::from_fn(cfg.space()?, |x, y| cfg.model.psi(x, y)))
}

fn simulate_cmd(a: SimulateArgs) -> Outcome {
    let started = unix_now();
    let mut cfg = load(a.common.config.as_deref())?;
    if let Some(n) = a.agents {
        cfg.sim.n_agents = n;
    }
    if let Some(s) = a.seed {
        cfg.sim.seed = s;
    }
    if let Some(c) = a.control {
        cfg.sim.control_mode = match c.as_str() {
            "zero" => ControlMode::Zero,
            "feedback" => ControlMode::Feedback,
            other => return Err(Failure::Config(format!("--control must be one of zero, feedback (got `{other}`)"))),
        };
    }
    cfg.validate()?;
    let dir = &a.common.out;
    out_dir(dir)?;
    let (grid, time) = (cfg.space()?, cfg.time()?);
    let m0 = cfg.initial_field()?;
    let init = match cfg.sim.start {
        Some([x, y]) => AgentEnsemble::at_point(cfg.sim.n_agents, x, y, cfg.sim.seed),
        None => AgentEnsemble::sample_from(&m0, cfg.sim.n_agents, cfg.sim.seed)?,
    };
    let solved = match cfg.sim.control_mode {
        ControlMode::Feedback => {
            let sol = solve_mfg(&m0, &terminal(&cfg)?, &cfg.model, time, &cfg.solver)?;
            if !sol.converged {
                log::warn!("Picard iteration did not converge; using the best iterate");
            }
            Some(sol)
        }
        ControlMode::Zero => None,
    };
    let out = simulate(&init, solved.as_ref().map(|s| &s.u), solved.as_ref().map(|s| &s.m), &cfg.model, &cfg.sim, time)?;

    let csv_err = |p: &Path, e: csv::Error| Failure::Config(format!("{}: {e}", p.display()));
    let paths = dir.join("paths.csv");
    let mut w = csv::Writer::from_path(&paths).map_err(|e| csv_err(&paths, e))?;
    w.write_record(["t", "agent_id", "x", "y", "alive"]).map_err(|e| csv_err(&paths, e))?;
    for (n, snap) in out.history.snapshots.iter().enumerate() {
        let t = time.t(n);
        for (id, (x, y, alive)) in snap.iter().enumerate().take(cfg.sim.record_paths) {
            w.write_record([format!("{t:.16e}"), id.to_string(), format!("{x:.16e}"), format!("{y:.16e}"), (*alive as u8).to_string()])
                .map_err(|e| csv_err(&paths, e))?;
        }
    }
    w.flush().map_err(|e| Failure::Config(e.to_string()))?;

    let costs = dir.join("costs.csv");
    let mut w = csv::Writer::from_path(&costs).map_err(|e| csv_err(&costs, e))?;
    w.write_record(["agent_id", "cost", "absorbed_at"]).map_err(|e| csv_err(&costs, e))?;
    for (id, c) in out.ensemble.accumulated_cost.iter().enumerate() {
        let tau = out.ensemble.absorption_time[id].map(|t| format!("{t:.16e}")).unwrap_or_default();
        w.write_record([id.to_string(), format!("{c:.16e}"), tau]).map_err(|e| csv_err(&costs, e))?;
    }
    w.flush().map_err(|e| Failure::Config(e.to_string()))?;

    let bandwidth = cfg.sim.bandwidth.unwrap_or(1.5 * grid.hx().max(grid.hy()));
    empirical_density(&out.history, &grid, bandwidth)?.write_csv(&dir.join("density.csv"))?;
    let files = ["paths.csv", "costs.csv", "density.csv"].map(String::from);
    RunManifest::new("simulate", cfg.to_value(), Some(cfg.sim.seed), started).finish(dir, &files)?;
    println!(
        "mean cost {:.6} +- {:.6} (std. error), alive fraction at T {:.4}, dt {:.3e}",
        out.mean_cost,
        out.std_error,
        out.ensemble.alive_fraction(),
        out.dt_used
    );
    Ok(())
}

fn verify_carleman(a: CarlemanArgs) -> Outcome {
    let started = unix_now();
    if a.suite_size == 0 {
        return Err(Failure::Config("--suite-size must be >= 1".into()));
    }
    let q = Quadrature::default();
    let suite = random_suite(a.suite_size, 2, a.seed);
    let op = match a.theorem {
        Theorem::T71 => {
            let s = a.sigma_sq.into();
            DiagonalOperator::from_volatilities(&s, &s)
        }
        _ => DiagonalOperator::constant(a.coefficient, a.coefficient),
    };
    let table = scan_thresholds(&suite, a.theorem, &op, &a.lambda_list, &a.s_list, &q)?;
    for row in &table.rows {
        println!(
            "lambda {:>5} s {:>4}: min relative margin {:+.3e}  holds {}  quadrature trusted {}",
            row.lambda, row.s, row.min_relative_margin, row.all_hold, row.all_valid
        );
    }
    println!("threshold s = {:?}", table.threshold);
    let report = json!({
        "theorem": a.theorem,
        "suite_size": a.suite_size,
        "seed": a.seed,
        "quadrature": q,
        "rows": table.rows,
        "threshold": table.threshold,
        "reports": table.reports,
    });
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    write_json(&a.out, &report)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = a.out.file_name().and_then(|n| n.to_str()).unwrap_or("report.json").to_owned();
    let config = json!({
        "theorem": a.theorem, "suite_size": a.suite_size, "lambda_list": a.lambda_list, "s_list": a.s_list,
        "seed": a.seed, "coefficient": a.coefficient, "sigma_sq": a.sigma_sq, "quadrature": q,
    });
    RunManifest::new("verify-carleman", config, Some(a.seed), started).finish(dir, &[name])?;
    if table.rows.iter().all(|r| r.all_hold) {
        Ok(())
    } else {
        Err(Failure::Numerical("some margins are negative; see the report".into()))
    }
}

fn retro(a: RetroArgs) -> Outcome {
    let started = unix_now();
    let mut cfg = load(a.config.as_deref())?;
    if let Some(g) = a.gamma {
        cfg.retro.gamma = g;
    }
    if let Some(alpha) = a.alpha {
        cfg.retro.tikhonov_alpha = alpha;
    }
    cfg.validate_retro()?;
    if a.delta_list.is_empty() || a.delta_list.iter().any(|d| !(*d >= 0.0)) {
        return Err(Failure::Config("--delta-list needs values >= 0".into()));
    }
    if a.seeds.is_empty() {
        return Err(Failure::Config("--seeds needs at least one seed".into()));
    }
    out_dir(&a.out_dir)?;
    let written = std::sync::Mutex::new(Vec::new());
    let sink = |data: &NoisySnapshot, rec: &Reconstruction| {
        if data.seed != a.seeds[0] {
            return;
        }
        let (fu, fm) = (format!("u_delta_{:e}.csv", data.delta), format!("m_delta_{:e}.csv", data.delta));
        let res = rec.solution.u.write_csv(&a.out_dir.join(&fu)).and_then(|_| rec.solution.m.write_csv(&a.out_dir.join(&fm)));
        written.lock().expect("no panics while holding the lock").push(res.map(|_| [fu, fm]));
    };
    let report = stability_experiment_with(&cfg.model, cfg.space()?, cfg.time()?, &cfg.solver, &cfg.retro, &a.delta_list, &a.seeds, &sink)?;
    write_json(&a.out_dir.join("stability.json"), &report)?;
    let mut files = vec!["stability.json".to_owned()];
    for res in written.into_inner().expect("no panics while holding the lock") {
        files.extend(res?);
    }
    files[1..].sort();
    for r in &report.records {
        println!(
            "delta {:.1e} seed {}: window error {:.4e}, full error {:.4e}, m0 relative error {:.3e}{}",
            r.delta,
            r.seed,
            r.window_total,
            r.full_total,
            r.m0_relative_error,
            r.failure.as_deref().map(|f| format!(" [failed: {f}]")).unwrap_or_default()
        );
    }
    let mut config = cfg.to_value();
    config["delta_list"] = json!(a.delta_list);
    config["seeds"] = json!(a.seeds);
    RunManifest::new("retro", config, a.seeds.first().copied(), started).finish(&a.out_dir, &files)?;
    match report.fitted_exponent {
        Some(rho) => println!("fitted exponent {rho:.4}"),
        None => println!("fitted exponent unavailable"),
    }
    if report.records.iter().any(|r| r.failure.is_some()) {
        return Err(Failure::Numerical("some reconstructions failed".into()));
    }
    Ok(())
}

fn logistic(a: LogisticArgs) -> Outcome {
    if !(a.dt > 0.0 && a.t_end > 0.0 && a.y0 > 0.0 && a.y0 < 1.0) {
        return Err(Failure::Config("logistic-check needs dt > 0, t-end > 0 and y0 in (0, 1)".into()));
    }
    let (sim, exact) = logistic_check(a.y0, a.beta_b, a.dt, a.t_end);
    println!("y({}) simulated {sim:.8}, closed form {exact:.8}, max error {:.3e}", a.t_end, (sim - exact).abs());
    Ok(())
}
