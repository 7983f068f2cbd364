//! Monte Carlo simulation of the controlled diffusion
//! `dx = alpha phi1 dt + sigma1 dW1`, `dy = beta phi2 dt + sigma2 dW2`,
//! absorbed on `x = 1` and reflected on the other faces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, trapezoid_weights, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::model::{MeanFields, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Zero,
    Feedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_agents: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub control_mode: ControlMode,
    /// Common starting point; when absent agents are drawn from the initial density.
    pub start: Option<[f64; 2]>,
    /// KDE bandwidth; defaults to 1.5 grid spacings.
    pub bandwidth: Option<f64>,
    /// Number of agents whose paths are written out.
    pub record_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_agents: 1000,
            dt_sim: 1e-3,
            seed: 0,
            control_mode: ControlMode::Zero,
            start: None,
            bandwidth: None,
            record_paths: 100,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::invalid("sim.n_agents", ">= 1", 0));
        }
        if !(self.dt_sim > 0.0 && self.dt_sim.is_finite()) {
            return Err(Error::invalid("sim.dt_sim", "> 0", self.dt_sim));
        }
        if let Some([x, y]) = self.start {
            if !((0.0..1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(Error::invalid("sim.start", "inside [0,1) x [0,1]", format!("[{x}, {y}]")));
            }
        }
        if let Some(b) = self.bandwidth {
            if !(b > 0.0) {
                return Err(Error::invalid("sim.bandwidth", "> 0", b));
            }
        }
        Ok(())
    }
}

/// State of every agent plus its private random stream.
#[derive(Clone, Debug)]
pub struct AgentEnsemble {
    pub positions: Vec<(f64, f64)>,
    pub alive: Vec<bool>,
    pub absorption_time: Vec<Option<f64>>,
    pub accumulated_cost: Vec<f64>,
    pub rng_seed: u64,
    /// Current time of the ensemble.
    pub t: f64,
    rngs: Vec<ChaCha8Rng>,
}

fn agent_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

impl AgentEnsemble {
    pub fn new(positions: Vec<(f64, f64)>, seed: u64) -> Self {
        let n = positions.len();
        AgentEnsemble {
            alive: vec![true; n],
            absorption_time: vec![None; n],
            accumulated_cost: vec![0.0; n],
            rng_seed: seed,
            t: 0.0,
            rngs: (0..n).map(|i| agent_rng(seed, i)).collect(),
            positions,
        }
    }

    pub fn at_point(n: usize, x: f64, y: f64, seed: u64) -> Self {
        Self::new(vec![(x, y); n], seed)
    }

    /// Draws starting points from a nonnegative density: a node is chosen
    /// with probability proportional to its quadrature mass, then the point is
    /// spread uniformly over the node's cell.
    pub fn sample_from(m0: &ScalarField, n: usize, seed: u64) -> Result<Self> {
        use rand::distr::weighted::WeightedIndex;
        use rand::Rng;
        let grid = m0.grid();
        let w: Vec<f64> = grid.weights().iter().zip(m0.values()).map(|(w, v)| w * v.max(0.0)).collect();
        let dist = WeightedIndex::new(&w).map_err(|e| Error::Admissibility(format!("cannot sample agents from the initial density: {e}")))?;
        let mut rng = agent_rng(seed ^ 0x5eed, usize::MAX >> 1);
        let (hx, hy) = (grid.hx(), grid.hy());
        let positions = (0..n)
            .map(|_| {
                let (x, y) = grid.coords(dist.sample(&mut rng));
                let px = (x + hx * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0 - 1e-12);
                let py = (y + hy * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
                (px, py)
            })
            .collect();
        Ok(Self::new(positions, seed))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_fraction(&self) -> f64 {
        self.alive.iter().filter(|a| **a).count() as f64 / self.len().max(1) as f64
    }
}

/// Feedback law `(x, y, t) -> (alpha, beta)`.
pub trait Controls: Sync {
    fn at(&self, x: f64, y: f64, t: f64) -> (f64, f64);
}

impl<F: Fn(f64, f64, f64) -> (f64, f64) + Sync> Controls for F {
    fn at(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        self(x, y, t)
    }
}

pub struct ZeroControls;

impl Controls for ZeroControls {
    fn at(&self, _: f64, _: f64, _: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Optimal feedback from a value function: grid gradients interpolated
/// bilinearly in space and linearly in time.
pub struct FeedbackControls<'a> {
    params: &'a ModelParams,
    grid: Grid,
    time: TimeGrid,
    ux: Vec<Vec<f64>>,
    uy: Vec<Vec<f64>>,
}

impl<'a> FeedbackControls<'a> {
    pub fn new(u: &SpaceTimeField, params: &'a ModelParams) -> Self {
        let (ux, uy) = (0..u.time().nt())
            .map(|n| {
                let g = gradient(&u.level_field(n));
                (g[0].values().to_vec(), g[1].values().to_vec())
            })
            .unzip();
        FeedbackControls { params, grid: *u.grid(), time: *u.time(), ux, uy }
    }

    pub fn gradient_at(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (n, w) = time_bracket(&self.time, t);
        let lerp = |f: &[Vec<f64>]| {
            let a = bilinear(&self.grid, &f[n], x, y);
            if w == 0.0 {
                a
            } else {
                (1.0 - w) * a + w * bilinear(&self.grid, &f[n + 1], x, y)
            }
        };
        (lerp(&self.ux), lerp(&self.uy))
    }
}

impl Controls for FeedbackControls<'_> {
    fn at(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        self.params.optimal_controls(x, y, self.gradient_at(x, y, t))
    }
}

fn time_bracket(time: &TimeGrid, t: f64) -> (usize, f64) {
    let nt = time.nt();
    let p = (t / time.dt()).clamp(0.0, (nt - 1) as f64);
    let n = (p.floor() as usize).min(nt - 2);
    (n, p - n as f64)
}

fn bilinear(grid: &Grid, v: &[f64], x: f64, y: f64) -> f64 {
    let (nx, ny) = (grid.nx(), grid.ny());
    let px = x.clamp(0.0, 1.0) / grid.hx();
    let py = y.clamp(0.0, 1.0) / grid.hy();
    let i = (px.floor() as usize).min(nx - 2);
    let j = (py.floor() as usize).min(ny - 2);
    let (a, b) = (px - i as f64, py - j as f64);
    let k = j * nx + i;
    (1.0 - b) * ((1.0 - a) * v[k] + a * v[k + 1]) + b * ((1.0 - a) * v[k + nx] + a * v[k + nx + 1])
}

/// Mean-field coupling along paths, read from a PDE density.
struct PathCoupling {
    time: TimeGrid,
    means: Vec<MeanFields>,
}

impl PathCoupling {
    fn new(m: &SpaceTimeField, params: &ModelParams) -> Self {
        let grid = *m.grid();
        let means = (0..m.time().nt())
            .map(|n| {
                let clipped: Vec<f64> = m.level(n).iter().map(|v| v.max(0.0)).collect();
                params.mean_fields_unchecked(&grid, &clipped)
            })
            .collect();
        PathCoupling { time: *m.time(), means }
    }

    fn at(&self, params: &ModelParams, x: f64, y: f64, t: f64) -> f64 {
        let (n, w) = time_bracket(&self.time, t);
        let (a_y, a_x) = self.means[n].at(x, y);
        let (b_y, b_x) = self.means[n + 1].at(x, y);
        let (my, mx) = ((1.0 - w) * a_y + w * b_y, (1.0 - w) * a_x + w * b_x);
        params.g(x - my, y - mx)
    }
}

struct Agent<'a> {
    x: f64,
    y: f64,
    cost: f64,
    absorbed_at: Option<f64>,
    rng: &'a mut ChaCha8Rng,
}

fn fold_unit(mut v: f64) -> f64 {
    // reflect into [0, 1] across both ends
    loop {
        if v < 0.0 {
            v = -v;
        } else if v > 1.0 {
            v = 2.0 - v;
        } else {
            return v;
        }
    }
}

/// One Euler-Maruyama step with the given controls; returns `true` while alive.
fn advance(agent: &mut Agent<'_>, alpha: f64, beta: f64, params: &ModelParams, t: f64, dt: f64) -> bool {
    let (x, y) = (agent.x, agent.y);
    let s1 = params.sigma1_sq.eval(x, y, t).max(0.0).sqrt();
    let s2 = params.sigma2_sq.eval(x, y, t).max(0.0).sqrt();
    let z1: f64 = StandardNormal.sample(agent.rng);
    let z2: f64 = StandardNormal.sample(agent.rng);
    let sq = dt.sqrt();
    let mut nx = x + alpha * params.phi1(x, y) * dt + s1 * sq * z1;
    let ny = fold_unit(y + beta * params.phi2(x, y) * dt + s2 * sq * z2);
    if nx < 0.0 {
        nx = -nx;
    }
    if nx >= 1.0 {
        agent.x = 1.0;
        agent.y = ny;
        agent.absorbed_at = Some(t + dt);
        agent.cost += params.psi(1.0, ny);
        return false;
    }
    agent.x = nx;
    agent.y = ny;
    true
}

/// Moves every alive agent by one step of length `dt`; absorbed agents
/// have `Psi` at the exit point added to their cost.
pub fn step_sde(ens: &mut AgentEnsemble, controls: &dyn Controls, params: &ModelParams, dt: f64) {
    let t = ens.t;
    ens.positions
        .par_iter_mut()
        .zip(ens.alive.par_iter_mut())
        .zip(ens.absorption_time.par_iter_mut())
        .zip(ens.accumulated_cost.par_iter_mut())
        .zip(ens.rngs.par_iter_mut())
        .for_each(|((((pos, alive), tau), cost), rng)| {
            if !*alive {
                return;
            }
            let (alpha, beta) = controls.at(pos.0, pos.1, t);
            let mut a = Agent { x: pos.0, y: pos.1, cost: *cost, absorbed_at: None, rng };
            *alive = advance(&mut a, alpha, beta, params, t, dt);
            *pos = (a.x, a.y);
            *cost = a.cost;
            *tau = a.absorbed_at;
        });
    ens.t += dt;
}

/// Positions at the snapshot times; `alive` is false from absorption on.
#[derive(Clone, Debug)]
pub struct EnsembleHistory {
    pub time: TimeGrid,
    /// `snapshots[n][agent] = (x, y, alive)`.
    pub snapshots: Vec<Vec<(f64, f64, bool)>>,
}

impl EnsembleHistory {
    pub fn alive_fraction(&self, n: usize) -> f64 {
        let s = &self.snapshots[n];
        s.iter().filter(|a| a.2).count() as f64 / s.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub ensemble: AgentEnsemble,
    pub history: EnsembleHistory,
    pub mean_cost: f64,
    pub std_error: f64,
    /// Step actually used (the largest value `<= dt_sim` that divides the snapshot spacing).
    pub dt_used: f64,
}

/// Per-agent snapshots, cost, absorption time and final RNG state.
type Trace = (Vec<(f64, f64, bool)>, f64, Option<f64>, ChaCha8Rng);

/// Runs every agent to `T` (or absorption), accumulating
/// `int (-c + h + G) dt + Psi` with left-point quadrature. Feedback mode
/// needs `u`; `m` supplies the coupling (the density is taken as zero when
/// absent). Snapshots are taken on the time grid of `u`, or on `snapshots`.
pub fn simulate(
    init: &AgentEnsemble,
    u: Option<&SpaceTimeField>,
    m: Option<&SpaceTimeField>,
    params: &ModelParams,
    cfg: &SimConfig,
    snapshots: TimeGrid,
) -> Result<SimOutcome> {
    cfg.validate()?;
    let feedback = match (cfg.control_mode, u) {
        (ControlMode::Feedback, Some(u)) => Some(FeedbackControls::new(u, params)),
        (ControlMode::Feedback, None) => {
            return Err(Error::Admissibility("feedback control needs a value function".into()));
        }
        (ControlMode::Zero, _) => None,
    };
    let coupling = m.map(|m| PathCoupling::new(m, params));
    let per = ((snapshots.dt() / cfg.dt_sim).ceil() as usize).max(1);
    let dt = snapshots.dt() / per as f64;
    let nt = snapshots.nt();
    let t0 = init.t;

    let traces: Vec<Trace> = (0..init.len())
        .into_par_iter()
        .map(|id| {
            let mut rng = init.rngs[id].clone();
            let (x, y) = init.positions[id];
            let mut snaps = Vec::with_capacity(nt);
            let mut agent = Agent { x, y, cost: init.accumulated_cost[id], absorbed_at: init.absorption_time[id], rng: &mut rng };
            let mut alive = init.alive[id];
            snaps.push((agent.x, agent.y, alive));
            for n in 0..nt - 1 {
                for k in 0..per {
                    if !alive {
                        break;
                    }
                    let t = t0 + snapshots.t(n) + k as f64 * dt;
                    let (alpha, beta) = match &feedback {
                        Some(f) => f.at(agent.x, agent.y, t),
                        None => (0.0, 0.0),
                    };
                    let g = match &coupling {
                        Some(c) => c.at(params, agent.x, agent.y, t),
                        None => params.g(agent.x, agent.y),
                    };
                    let running = -params.income(agent.x, agent.y, t) + params.running_cost_h(alpha, beta, agent.x, agent.y) + g;
                    agent.cost += running * dt;
                    alive = advance(&mut agent, alpha, beta, params, t, dt);
                }
                snaps.push((agent.x, agent.y, alive));
            }
            if alive {
                agent.cost += params.psi(agent.x, agent.y);
            }
            let (cost, tau) = (agent.cost, agent.absorbed_at);
            (snaps, cost, tau, rng)
        })
        .collect();

    let mut ensemble = init.clone();
    let mut history = vec![Vec::with_capacity(init.len()); nt];
    for (id, (snaps, cost, tau, rng)) in traces.into_iter().enumerate() {
        let last = *snaps.last().expect("at least one snapshot");
        ensemble.positions[id] = (last.0, last.1);
        ensemble.alive[id] = last.2;
        ensemble.accumulated_cost[id] = cost;
        ensemble.absorption_time[id] = tau;
        ensemble.rngs[id] = rng;
        for (n, s) in snaps.into_iter().enumerate() {
            history[n].push(s);
        }
    }
    ensemble.t = t0 + snapshots.t_final();
    let (mean_cost, std_error) = mean_and_error(&ensemble.accumulated_cost);
    Ok(SimOutcome { ensemble, history: EnsembleHistory { time: snapshots, snapshots: history }, mean_cost, std_error, dt_used: dt })
}

/// Sample mean and its standard error (fixed-order sums).
pub fn mean_and_error(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Gaussian kernel estimate of the alive agents on every snapshot, with
/// mirror images across the reflecting faces, scaled so that its grid
/// integral equals the alive fraction.
pub fn empirical_density(history: &EnsembleHistory, grid: &Grid, bandwidth: f64) -> Result<SpaceTimeField> {
    if grid.dim() != 2 {
        return Err(Error::Grid("density estimates need a two-dimensional grid".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth", "> 0", bandwidth));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let wx = trapezoid_weights(nx, grid.hx());
    let wy = trapezoid_weights(ny, grid.hy());
    let reach = 5.0 * bandwidth;
    let kern = |d: f64| (-0.5 * (d / bandwidth).powi(2)).exp();
    let levels: Vec<Vec<f64>> = history
        .snapshots
        .par_iter()
        .map(|agents| {
            let mut rho = vec![0.0; grid.len()];
            let mut kx = vec![0.0; nx];
            let mut ky = vec![0.0; ny];
            let mut alive = 0usize;
            for &(x, y, a) in agents {
                if !a {
                    continue;
                }
                alive += 1;
                let i0 = ((x - reach) / grid.hx()).floor().max(0.0) as usize;
                let i1 = (((x + reach) / grid.hx()).ceil() as usize).min(nx - 1);
                let j0 = ((y - reach) / grid.hy()).floor().max(0.0) as usize;
                let j1 = (((y + reach) / grid.hy()).ceil() as usize).min(ny - 1);
                for (i, k) in kx.iter_mut().enumerate().take(i1 + 1).skip(i0) {
                    let xi = grid.x(i);
                    *k = kern(xi - x) + kern(xi + x);
                }
                for (j, k) in ky.iter_mut().enumerate().take(j1 + 1).skip(j0) {
                    let yj = grid.y(j);
                    *k = kern(yj - y) + kern(yj + y) + kern(yj - (2.0 - y));
                }
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        rho[j * nx + i] += kx[i] * ky[j];
                    }
                }
            }
            let total: f64 = (0..ny).map(|j| wy[j] * (0..nx).map(|i| wx[i] * rho[j * nx + i]).sum::<f64>()).sum();
            if alive > 0 && total > 0.0 {
                let scale = alive as f64 / agents.len() as f64 / total;
                rho.iter_mut().for_each(|r| *r *= scale);
            }
            rho
        })
        .collect();
    SpaceTimeField::new(*grid, history.time, levels.concat())
}

/// Deterministic career growth: with `x = 0`, `sigma = 0` and constant
/// `beta`, `y' = beta b y (1 - y)`. Returns `(simulated, exact)` at `t_end`.
pub fn logistic_check(y0: f64, beta_b: f64, dt: f64, t_end: f64) -> (f64, f64) {
    let params = ModelParams {
        b: 1.0,
        sigma1_sq: 0.0.into(),
        sigma2_sq: 0.0.into(),
        ..ModelParams::default()
    };
    let mut ens = AgentEnsemble::at_point(1, 0.0, y0, 0);
    let controls = move |_: f64, _: f64, _: f64| (0.0, beta_b);
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        step_sde(&mut ens, &controls, &params, dt);
    }
    let exact = 1.0 / (1.0 + (1.0 / y0 - 1.0) * (-beta_b * t_end).exp());
    (ens.positions[0].1, exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Income;

    #[test]
    fn frozen_agents_do_not_move() {
        let p = ModelParams { sigma1_sq: 0.0.into(), sigma2_sq: 0.0.into(), ..ModelParams::default() };
        let mut ens = AgentEnsemble::at_point(5, 0.3, 0.6, 1);
        for _ in 0..10 {
            step_sde(&mut ens, &ZeroControls, &p, 0.01);
        }
        assert!(ens.positions.iter().all(|&(x, y)| x == 0.3 && y == 0.6));
    }

    #[test]
    fn logistic_growth() {
        let (sim, exact) = logistic_check(0.5, 1.0, 1e-4, 1.0);
        assert!((exact - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((sim - exact).abs() < 1e-3);
        let (late, _) = logistic_check(0.5, 1.0, 1e-3, 20.0);
        assert!(late > 0.999);
        // first-order convergence in dt
        let e1 = (logistic_check(0.5, 1.0, 0.02, 1.0).0 - exact).abs();
        let e2 = (logistic_check(0.5, 1.0, 0.01, 1.0).0 - exact).abs();
        assert!((e1 / e2 - 2.0).abs() < 0.1, "{e1} {e2}");
    }

    #[test]
    fn reflection_keeps_agents_inside() {
        let p = ModelParams { sigma1_sq: 2.0.into(), sigma2_sq: 2.0.into(), ..ModelParams::default() };
        let mut ens = AgentEnsemble::at_point(500, 0.1, 0.05, 9);
        for _ in 0..50 {
            step_sde(&mut ens, &ZeroControls, &p, 0.01);
            for (k, &(x, y)) in ens.positions.iter().enumerate() {
                assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
                if !ens.alive[k] {
                    assert_eq!(x, 1.0);
                }
            }
        }
        assert!(ens.alive_fraction() < 1.0);
    }

    #[test]
    fn empty_integrand_costs_nothing() {
        let p = ModelParams { income: Income::zero(), g_a1: 0.0, g_b1: 0.0, psi: 0.0.into(), ..ModelParams::default() };
        let init = AgentEnsemble::at_point(200, 0.5, 0.5, 4);
        let out = simulate(&init, None, None, &p, &SimConfig::default(), TimeGrid::new(1.0, 5).unwrap()).unwrap();
        assert_eq!(out.mean_cost, 0.0);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let p = ModelParams::default();
        let init = AgentEnsemble::at_point(300, 0.4, 0.5, 17);
        let cfg = SimConfig { dt_sim: 0.01, ..SimConfig::default() };
        let t = TimeGrid::new(1.0, 11).unwrap();
        let a = simulate(&init, None, None, &p, &cfg, t).unwrap();
        let b = simulate(&init, None, None, &p, &cfg, t).unwrap();
        assert_eq!(a.ensemble.accumulated_cost, b.ensemble.accumulated_cost);
        assert_eq!(a.ensemble.positions, b.ensemble.positions);
    }

    #[test]
    fn kde_of_point_mass_has_unit_integral() {
        let grid = Grid::unit_square(17, 17).unwrap();
        let history = EnsembleHistory { time: TimeGrid::new(1.0, 2).unwrap(), snapshots: vec![vec![(0.4, 0.5, true); 50], vec![(1.0, 0.5, false); 50]] };
        let rho = empirical_density(&history, &grid, 1.5 * grid.hx()).unwrap();
        let mass = crate::grid::integrate_space(&rho.level_field(0)).unwrap();
        assert!((mass - 1.0).abs() < 1e-12);
        assert_eq!(rho.level_field(1).max_abs(), 0.0);
    }

    #[test]
    fn alive_fraction_is_nonincreasing() {
        let p = ModelParams::default();
        let init = AgentEnsemble::at_point(400, 0.7, 0.5, 2);
        let cfg = SimConfig { dt_sim: 0.005, ..SimConfig::default() };
        let out = simulate(&init, None, None, &p, &cfg, TimeGrid::new(2.0, 21).unwrap()).unwrap();
        for n in 1..21 {
            assert!(out.history.alive_fraction(n) <= out.history.alive_fraction(n - 1));
        }
    }
}
