//! Reconstruction of the past from noisy terminal snapshots of `u` and `m`.
//!
//! Given the current density trajectory the HJB equation is solved backward
//! from the noisy `u_T`. With `u` frozen the FP map `m0 -> m(T)` is linear,
//! and `m0` is recovered by Tikhonov-regularized least squares
//! `min |A m0 - m_T|^2 + alpha |m0|_{H1}^2`, solved with conjugate gradients
//! on the normal equations using the exact transpose of the discrete steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{h1_norm, partial, weighted_sum, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::model::ModelParams;
use crate::solvers::{solve_hjb_backward, solve_mfg, FpBoundary, FpOperator, MFGSolution, SolverConfig};

/// Highest cosine index used by the noise model.
const NOISE_MODES: usize = 6;

/// `f + eta`, where `eta` is a random cosine series with modes up to 6 whose
/// discrete H1 norm equals `delta`.
pub fn add_noise(f_true: &ScalarField, delta: f64, seed: u64) -> Result<ScalarField> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", ">= 0", delta));
    }
    if delta == 0.0 {
        return Ok(f_true.clone());
    }
    let grid = *f_true.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ly = if grid.dim() == 2 { NOISE_MODES } else { 0 };
    let mut coef = vec![0.0; (NOISE_MODES + 1) * (ly + 1)];
    for (idx, c) in coef.iter_mut().enumerate() {
        let (k, l) = (idx % (NOISE_MODES + 1), idx / (NOISE_MODES + 1));
        let z: f64 = StandardNormal.sample(&mut rng);
        *c = z / (1.0 + (k * k + l * l) as f64);
    }
    let eta = ScalarField::from_fn(grid, |x, y| {
        coef.iter()
            .enumerate()
            .map(|(idx, c)| {
                let (k, l) = ((idx % (NOISE_MODES + 1)) as f64, (idx / (NOISE_MODES + 1)) as f64);
                c * (k * std::f64::consts::PI * x).cos() * (l * std::f64::consts::PI * y).cos()
            })
            .sum()
    });
    let base = h1_norm(&eta);
    if !(base > 0.0) {
        return Err(Error::Admissibility("noise realization vanished on this grid".into()));
    }
    // rescale until the perturbation actually stored meets delta after rounding
    let mut scale = delta / base;
    let mut out = f_true.clone();
    for _ in 0..8 {
        for ((o, f), e) in out.values_mut().iter_mut().zip(f_true.values()).zip(eta.values()) {
            *o = f + scale * e;
        }
        let got = h1_norm(&out.sub(f_true)?);
        if ((got - delta) / delta).abs() < 1e-14 {
            break;
        }
        scale *= delta / got;
    }
    Ok(out)
}

/// Noisy terminal data for both unknowns.
#[derive(Clone, Debug)]
pub struct NoisySnapshot {
    pub u_t_noisy: ScalarField,
    pub m_t_noisy: ScalarField,
    pub delta: f64,
    pub seed: u64,
}

impl NoisySnapshot {
    pub fn new(u_t: &ScalarField, m_t: &ScalarField, delta: f64, seed: u64) -> Result<Self> {
        Ok(NoisySnapshot {
            u_t_noisy: add_noise(u_t, delta, seed.wrapping_mul(2))?,
            m_t_noisy: add_noise(m_t, delta, seed.wrapping_mul(2).wrapping_add(1))?,
            delta,
            seed,
        })
    }
}

/// `lambda(delta) = -ln(delta) / (3 (T + 2)^s1)`, admissible while `lambda >= 1`.
pub fn lambda_of_delta(delta: f64, t_final: f64, s1_hat: f64) -> Result<f64> {
    let denom = 3.0 * (t_final + 2.0).powf(s1_hat);
    let bound = (-denom).exp();
    if !(delta > 0.0 && delta <= bound * (1.0 + 1e-12)) {
        return Err(Error::invalid("delta", format!("in (0, {bound:e}] so that lambda >= 1"), delta));
    }
    Ok((-delta.ln() / denom).max(1.0))
}

/// Regularization weight: fixed, or `delta^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Auto,
    Value(f64),
}

/// Smallest weight used by [`Alpha::Auto`] when `delta = 0`.
pub const AUTO_ALPHA_FLOOR: f64 = 1e-10;

impl Alpha {
    pub fn resolve(self, delta: f64) -> f64 {
        match self {
            Alpha::Value(a) => a,
            Alpha::Auto => (delta * delta).max(AUTO_ALPHA_FLOOR),
        }
    }
}

impl std::str::FromStr for Alpha {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            return Ok(Alpha::Auto);
        }
        match s.trim().parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Alpha::Value(v)),
            _ => Err(Error::invalid("alpha", "\"auto\" or a number > 0", s)),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Auto => s.serialize_str("auto"),
            Alpha::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(Alpha::Value(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("alpha must be > 0 (got {v})"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetroConfig {
    pub gamma: f64,
    pub tikhonov_alpha: Alpha,
    pub cg_iters: usize,
    /// CG stops once the preconditioned residual drops below this fraction.
    pub cg_tol: f64,
    pub outer_iters: usize,
    /// Outer loop stops when the sup-change of `(u, m)` drops below this.
    pub tol: f64,
    pub s1_hat: f64,
    /// Generate synthetic data on a twice finer grid and time step.
    pub half_resolution: bool,
}

impl Default for RetroConfig {
    fn default() -> Self {
        RetroConfig {
            gamma: 1.25,
            tikhonov_alpha: Alpha::Auto,
            cg_iters: 400,
            cg_tol: 1e-10,
            outer_iters: 8,
            tol: 1e-6,
            s1_hat: 2.0,
            half_resolution: false,
        }
    }
}

impl RetroConfig {
    pub fn validate(&self, t_final: f64) -> Result<()> {
        if !(t_final > 1.0) {
            return Err(Error::invalid("T", "> 1 for the retrospective problem", t_final));
        }
        if !(self.gamma > 1.0 && self.gamma < t_final) {
            return Err(Error::invalid("retro.gamma", format!("in (1, {t_final})"), self.gamma));
        }
        if let Alpha::Value(a) = self.tikhonov_alpha {
            if !(a > 0.0) {
                return Err(Error::invalid("retro.tikhonov_alpha", "> 0", a));
            }
        }
        if self.cg_iters == 0 || self.outer_iters == 0 {
            return Err(Error::invalid("retro.cg_iters / retro.outer_iters", ">= 1", 0));
        }
        if !(self.s1_hat > 0.0) {
            return Err(Error::invalid("retro.s1_hat", "> 0", self.s1_hat));
        }
        if !(self.tol > 0.0 && self.cg_tol > 0.0) {
            return Err(Error::invalid("retro.tol / retro.cg_tol", "> 0", self.tol.min(self.cg_tol)));
        }
        Ok(())
    }
}

/// Outcome of one conjugate-gradient solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
    /// `false` when the relative residual stayed above `1e-8`.
    pub converged: bool,
}

/// Reconstructed trajectory plus diagnostics.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub solution: MFGSolution,
    pub m0: ScalarField,
    pub alpha: f64,
    pub cg: Vec<CgStats>,
    /// `max_t |u(., t)|_{C^2}` of the reconstruction.
    pub u_c2: f64,
    /// `max_t |m(., t)|_{C^1}` of the reconstruction.
    pub m_c1: f64,
    pub m_min: f64,
}

/// `W v + K v`: the Gram operator of the discrete H1 inner product, with
/// `K` the edge-difference stiffness matrix.
struct H1Gram {
    grid: Grid,
    wx: Vec<f64>,
    wy: Vec<f64>,
    w: Vec<f64>,
}

impl H1Gram {
    fn new(grid: Grid) -> Self {
        H1Gram { grid, wx: grid.weights_x(), wy: grid.weights_y(), w: grid.weights() }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        for (o, (w, x)) in out.iter_mut().zip(self.w.iter().zip(v)) {
            *o = w * x;
        }
        for j in 0..ny {
            let c = self.wy[j] / hx;
            for i in 0..nx - 1 {
                let k = j * nx + i;
                let d = c * (v[k] - v[k + 1]);
                out[k] += d;
                out[k + 1] -= d;
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let c = self.wx[i] / hy;
                let k = j * nx + i;
                let d = c * (v[k] - v[k + nx]);
                out[k] += d;
                out[k + nx] -= d;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(A^T W A + alpha H) m0 = A^T W m_T` by CG preconditioned with the
/// quadrature weights. Unknowns on the absorbing face are held at zero.
pub fn tikhonov_initial_density(op: &FpOperator, m_t: &ScalarField, alpha: f64, max_iters: usize, tol: f64) -> Result<(ScalarField, CgStats)> {
    let grid = *op.grid();
    if *m_t.grid() != grid {
        return Err(Error::Shape("terminal density does not match the operator grid".into()));
    }
    let n = grid.len();
    let w = grid.weights();
    let gram = H1Gram::new(grid);
    let free: Vec<bool> = (0..n).map(|k| !grid.on_gamma0(k)).collect();
    let mask = |v: &mut [f64]| v.iter_mut().zip(&free).for_each(|(x, f)| if !*f { *x = 0.0 });
    let normal = |v: &[f64], out: &mut [f64]| {
        let av = op.apply(v);
        let wav: Vec<f64> = av.iter().zip(&w).map(|(a, b)| a * b).collect();
        let back = op.apply_transpose(&wav);
        gram.apply(v, out);
        for (o, b) in out.iter_mut().zip(back) {
            *o = alpha * *o + b;
        }
        mask(out);
    };

    let wm: Vec<f64> = m_t.values().iter().zip(&w).map(|(a, b)| a * b).collect();
    let mut rhs = op.apply_transpose(&wm);
    mask(&mut rhs);
    let precond = |r: &[f64]| -> Vec<f64> { r.iter().zip(&w).map(|(a, b)| a / b).collect() };
    let mut x = vec![0.0; n];
    let mut r = rhs.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = rz.sqrt();
    let mut q = vec![0.0; n];
    let mut stats = CgStats { iterations: 0, relative_residual: 0.0, converged: true };
    if b_norm == 0.0 {
        return Ok((ScalarField::zeros(grid), stats));
    }
    for it in 1..=max_iters {
        normal(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            stats.iterations = it;
            break;
        }
        let a = rz / pq;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += a * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= a * qi);
        z = precond(&r);
        let rz_new = dot(&r, &z);
        stats.iterations = it;
        stats.relative_residual = rz_new.max(0.0).sqrt() / b_norm;
        if stats.relative_residual < tol {
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    stats.converged = stats.relative_residual < 1e-8;
    Ok((ScalarField::new(grid, x)?, stats))
}

/// Outer loop alternating the backward HJB solve and the regularized
/// recovery of `m0`. `initial` seeds the density trajectory; by default the
/// clipped terminal density is held constant in time.
pub fn reconstruct(
    data: &NoisySnapshot,
    params: &ModelParams,
    time: TimeGrid,
    cfg: &RetroConfig,
    initial: Option<&SpaceTimeField>,
) -> Result<Reconstruction> {
    cfg.validate(time.t_final())?;
    let grid = *data.m_t_noisy.grid();
    if *data.u_t_noisy.grid() != grid {
        return Err(Error::Shape("terminal snapshots live on different grids".into()));
    }
    let alpha = cfg.tikhonov_alpha.resolve(data.delta);
    let mut m = match initial {
        Some(m) => m.clone(),
        None => {
            let clipped = ScalarField::new(grid, data.m_t_noisy.values().iter().map(|v| v.max(0.0)).collect())?;
            SpaceTimeField::broadcast(&clipped, time)
        }
    };
    let mut u = SpaceTimeField::broadcast(&data.u_t_noisy, time);
    let mut history = Vec::new();
    let mut cg = Vec::new();
    let mut best: Option<(f64, SpaceTimeField, SpaceTimeField, ScalarField)> = None;
    let mut converged = false;
    for _ in 0..cfg.outer_iters {
        let u_new = solve_hjb_backward(&data.u_t_noisy, &m, params)?;
        let op = FpOperator::new(&u_new, params, FpBoundary::Absorbing)?;
        let (m0, stats) = tikhonov_initial_density(&op, &data.m_t_noisy, alpha, cfg.cg_iters, cfg.cg_tol)?;
        cg.push(stats);
        let m_new = op.trajectory(m0.values());
        let change = m_new.sup_distance(&m) + u_new.sup_distance(&u);
        history.push(change);
        m = m_new;
        u = u_new;
        if best.as_ref().is_none_or(|b| change <= b.0) {
            best = Some((change, u.clone(), m.clone(), m0.clone()));
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let (_, u, m, m0) = best.expect("at least one outer iteration");
    let (u_c2, m_c1, m_min) = smoothness(&u, &m);
    let solution = MFGSolution { u, m, iterations: history.len(), residual_history: history, converged };
    Ok(Reconstruction { solution, m0, alpha, cg, u_c2, m_c1, m_min })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// `(max_t |u|_{C^2}, max_t |m|_{C^1}, min m)` on the grid.
fn smoothness(u: &SpaceTimeField, m: &SpaceTimeField) -> (f64, f64, f64) {
    let grid = *u.grid();
    let mut u_c2 = 0.0_f64;
    let mut m_c1 = 0.0_f64;
    for n in 0..u.time().nt() {
        let lvl = u.level(n);
        let ux = partial(&grid, lvl, 0);
        let uy = partial(&grid, lvl, 1);
        let c2 = [sup(lvl), sup(&ux), sup(&uy), sup(&partial(&grid, &ux, 0)), sup(&partial(&grid, &ux, 1)), sup(&partial(&grid, &uy, 1))];
        u_c2 = c2.iter().fold(u_c2, |a, b| a.max(*b));
        let ml = m.level(n);
        m_c1 = m_c1.max(sup(ml)).max(sup(&partial(&grid, ml, 0))).max(sup(&partial(&grid, ml, 1)));
    }
    (u_c2, m_c1, m.min())
}

/// The eight L2 error norms over a time window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub u_t: f64,
    pub u_xx: f64,
    pub u_xy: f64,
    pub u_yy: f64,
    pub grad_u: f64,
    pub u: f64,
    pub grad_m: f64,
    pub m: f64,
}

impl ErrorNorms {
    pub fn total(&self) -> f64 {
        self.u_t + self.u_xx + self.u_xy + self.u_yy + self.grad_u + self.u + self.grad_m + self.m
    }

    /// Norms of `(u_rec - u_true, m_rec - m_true)` over `Omega x (t_from, T)`,
    /// using the time levels at or after `t_from` and the trapezoid rule.
    pub fn between(u_rec: &SpaceTimeField, u_true: &SpaceTimeField, m_rec: &SpaceTimeField, m_true: &SpaceTimeField, t_from: f64) -> Result<Self> {
        let eu = u_rec.sub(u_true)?;
        let em = m_rec.sub(m_true)?;
        let grid = *eu.grid();
        let time = *eu.time();
        let (nt, dt) = (time.nt(), time.dt());
        let first = (0..nt).find(|&n| time.t(n) >= t_from - 1e-12).unwrap_or(nt - 1);
        let sq = |v: &[f64]| weighted_sum(&grid, &v.iter().map(|a| a * a).collect::<Vec<_>>());
        let mut acc = [0.0; 8];
        for n in first..nt {
            let w = if nt - first == 1 {
                0.0
            } else if n == first || n == nt - 1 {
                0.5 * dt
            } else {
                dt
            };
            if w == 0.0 {
                continue;
            }
            let e = eu.level(n);
            let et: Vec<f64> = if n == 0 {
                (0..e.len()).map(|k| (-3.0 * eu.level(0)[k] + 4.0 * eu.level(1)[k] - eu.level(2)[k]) / (2.0 * dt)).collect()
            } else if n == nt - 1 {
                (0..e.len()).map(|k| (3.0 * eu.level(n)[k] - 4.0 * eu.level(n - 1)[k] + eu.level(n - 2)[k]) / (2.0 * dt)).collect()
            } else {
                (0..e.len()).map(|k| (eu.level(n + 1)[k] - eu.level(n - 1)[k]) / (2.0 * dt)).collect()
            };
            let ex = partial(&grid, e, 0);
            let ey = partial(&grid, e, 1);
            let mx = partial(&grid, em.level(n), 0);
            let my = partial(&grid, em.level(n), 1);
            let vals = [
                sq(&et),
                sq(&partial(&grid, &ex, 0)),
                sq(&partial(&grid, &ex, 1)),
                sq(&partial(&grid, &ey, 1)),
                sq(&ex) + sq(&ey),
                sq(e),
                sq(&mx) + sq(&my),
                sq(em.level(n)),
            ];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += w * v;
            }
        }
        let r = acc.map(f64::sqrt);
        Ok(ErrorNorms { u_t: r[0], u_xx: r[1], u_xy: r[2], u_yy: r[3], grad_u: r[4], u: r[5], grad_m: r[6], m: r[7] })
    }
}

/// Smooth default initial density, zero on `x = 1`.
pub fn default_initial_density(grid: Grid) -> ScalarField {
    use std::f64::consts::PI;
    ScalarField::from_fn(grid, |x, y| (0.5 * PI * x).cos() * (1.0 + 0.3 * (PI * y).cos()))
}

/// Forward solution used as ground truth, on the inversion grid.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub m0: ScalarField,
    pub u: SpaceTimeField,
    pub m: SpaceTimeField,
    pub converged: bool,
}

impl GroundTruth {
    /// Solves the forward problem from `m0` with terminal data `Psi`. With
    /// `half_resolution` the solve runs on the refined grid and time step and
    /// is then sampled at the coarse nodes.
    pub fn generate(params: &ModelParams, grid: Grid, time: TimeGrid, m0: &dyn Fn(f64, f64) -> f64, solver: &SolverConfig, half_resolution: bool) -> Result<Self> {
        let (g, t) = if half_resolution { (grid.refined(), time.refined()) } else { (grid, time) };
        let m0_field = ScalarField::from_fn(g, m0);
        let ut = ScalarField::from_fn(g, |x, y| params.psi(x, y));
        let sol = solve_mfg(&m0_field, &ut, params, t, solver)?;
        if !half_resolution {
            return Ok(GroundTruth { m0: m0_field, u: sol.u, m: sol.m, converged: sol.converged });
        }
        let sample = |f: &SpaceTimeField| {
            SpaceTimeField::from_fn(grid, time, |x, y, s| {
                let n = (s / t.dt()).round() as usize;
                let (i, j) = ((x / g.hx()).round() as usize, (y / g.hy()).round() as usize);
                f.level(n)[g.idx(i, j)]
            })
        };
        Ok(GroundTruth { m0: ScalarField::from_fn(grid, m0), u: sample(&sol.u), m: sample(&sol.m), converged: sol.converged })
    }

    pub fn terminal(&self) -> (ScalarField, ScalarField) {
        let last = self.u.time().nt() - 1;
        (self.u.level_field(last), self.m.level_field(last))
    }
}

/// Errors of one reconstruction at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub delta: f64,
    pub seed: u64,
    pub alpha: f64,
    /// `lambda(delta)` when `delta` lies in the admissible range.
    pub lambda: Option<f64>,
    pub window: ErrorNorms,
    pub window_total: f64,
    pub full: ErrorNorms,
    pub full_total: f64,
    /// Relative L2 error of the recovered initial density.
    pub m0_relative_error: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub cg: Vec<CgStats>,
    pub u_c2: f64,
    pub m_c1: f64,
    pub m_min: f64,
    /// Set when the reconstruction failed; such records are left out of the fit.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub gamma: f64,
    pub t_final: f64,
    pub records: Vec<StabilityRecord>,
    /// Least-squares slope of `ln(window total)` against `ln(delta)` over
    /// records with `delta > 0`.
    pub fitted_exponent: Option<f64>,
    pub truth_converged: bool,
}

/// Noisy data from a fixed ground truth at every `(delta, seed)`,
/// reconstruction, and the error norms on the window `t > gamma`.
pub fn stability_experiment(
    params: &ModelParams,
    grid: Grid,
    time: TimeGrid,
    solver: &SolverConfig,
    cfg: &RetroConfig,
    deltas: &[f64],
    seeds: &[u64],
) -> Result<StabilityReport> {
    stability_experiment_with(params, grid, time, solver, cfg, deltas, seeds, &|_, _| ())
}

/// [`stability_experiment`] that also hands every successful reconstruction to `sink`.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment_with(
    params: &ModelParams,
    grid: Grid,
    time: TimeGrid,
    solver: &SolverConfig,
    cfg: &RetroConfig,
    deltas: &[f64],
    seeds: &[u64],
    sink: &(dyn Fn(&NoisySnapshot, &Reconstruction) + Sync),
) -> Result<StabilityReport> {
    cfg.validate(time.t_final())?;
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("delta_list", "entries >= 0", format!("{deltas:?}")));
    }
    let m0 = default_initial_density(grid);
    let truth = GroundTruth::generate(params, grid, time, &|x, y| m0.interpolate(x, y), solver, cfg.half_resolution)?;
    let (u_t, m_t) = truth.terminal();
    let cells: Vec<(f64, u64)> = deltas.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();
    let records: Vec<StabilityRecord> = cells
        .par_iter()
        .map(|&(delta, seed)| {
            let lambda = lambda_of_delta(delta, time.t_final(), cfg.s1_hat).ok();
            let failed = |msg: String| StabilityRecord {
                delta,
                seed,
                alpha: cfg.tikhonov_alpha.resolve(delta),
                lambda,
                window: ErrorNorms::default(),
                window_total: f64::NAN,
                full: ErrorNorms::default(),
                full_total: f64::NAN,
                m0_relative_error: f64::NAN,
                outer_iterations: 0,
                converged: false,
                cg: Vec::new(),
                u_c2: f64::NAN,
                m_c1: f64::NAN,
                m_min: f64::NAN,
                failure: Some(msg),
            };
            let run = || -> Result<StabilityRecord> {
                let data = NoisySnapshot::new(&u_t, &m_t, delta, seed)?;
                let rec = reconstruct(&data, params, time, cfg, None)?;
                sink(&data, &rec);
                let window = ErrorNorms::between(&rec.solution.u, &truth.u, &rec.solution.m, &truth.m, cfg.gamma)?;
                let full = ErrorNorms::between(&rec.solution.u, &truth.u, &rec.solution.m, &truth.m, 0.0)?;
                Ok(StabilityRecord {
                    delta,
                    seed,
                    alpha: rec.alpha,
                    lambda,
                    window_total: window.total(),
                    window,
                    full_total: full.total(),
                    full,
                    m0_relative_error: relative_l2(&rec.m0, &truth.m0),
                    outer_iterations: rec.solution.iterations,
                    converged: rec.solution.converged,
                    cg: rec.cg,
                    u_c2: rec.u_c2,
                    m_c1: rec.m_c1,
                    m_min: rec.m_min,
                    failure: None,
                })
            };
            run().unwrap_or_else(|e| failed(e.to_string()))
        })
        .collect();
    let fitted_exponent = fit_exponent(&records);
    Ok(StabilityReport { gamma: cfg.gamma, t_final: time.t_final(), records, fitted_exponent, truth_converged: truth.converged })
}

/// `|a - b|_{L2} / |b|_{L2}` with trapezoid weights.
pub fn relative_l2(a: &ScalarField, b: &ScalarField) -> f64 {
    let grid = *a.grid();
    let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).collect();
    let norm: Vec<f64> = b.values().iter().map(|y| y * y).collect();
    (weighted_sum(&grid, &diff) / weighted_sum(&grid, &norm)).sqrt()
}

/// Least-squares slope of `ln(total)` on `ln(delta)`.
pub fn fit_exponent(records: &[StabilityRecord]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.failure.is_none() && r.delta > 0.0 && r.window_total > 0.0)
        .map(|r| (r.delta.ln(), r.window_total.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}
