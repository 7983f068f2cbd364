//! Finite-difference solution of the coupled HJB / Fokker-Planck system.
//!
//! The HJB equation runs backward from the terminal payoff, the FP equation
//! forward from the initial density, and [`solve_mfg`] couples them by a
//! damped Picard iteration.

mod fp;
mod hjb;

pub use fp::{solve_fp_forward, solve_fp_forward_with, FpBoundary, FpOperator, FpStep};
pub use hjb::solve_hjb_backward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{integrate_space, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::model::ModelParams;

/// Picard iteration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_picard_iters: usize,
    pub picard_tol: f64,
    /// Damping `theta` in `m <- theta m_new + (1 - theta) m_old`.
    pub damping: f64,
    pub scheme: String,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_picard_iters: 30, picard_tol: 1e-6, damping: 0.5, scheme: "imex-split".into() }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) {
            return Err(Error::invalid("solver.picard_tol", "> 0", self.picard_tol));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("solver.damping", "in (0, 1]", self.damping));
        }
        if self.max_picard_iters == 0 {
            return Err(Error::invalid("solver.max_picard_iters", ">= 1", 0));
        }
        if self.scheme != "imex-split" {
            return Err(Error::invalid("solver.scheme", "\"imex-split\"", &self.scheme));
        }
        Ok(())
    }
}

/// Value function and density with the Picard history.
#[derive(Clone, Debug)]
pub struct MFGSolution {
    pub u: SpaceTimeField,
    pub m: SpaceTimeField,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl MFGSolution {
    /// `int m(., t_n) dx` for every time level.
    pub fn mass_history(&self) -> Vec<f64> {
        mass_history(&self.m)
    }
}

pub fn mass_history(m: &SpaceTimeField) -> Vec<f64> {
    (0..m.time().nt())
        .map(|n| integrate_space(&m.level_field(n)).expect("finite density"))
        .collect()
}

/// Damped Picard iteration between the backward and forward solves,
/// starting from the purely diffusive density.
pub fn solve_mfg(m0: &ScalarField, u_terminal: &ScalarField, params: &ModelParams, time: TimeGrid, cfg: &SolverConfig) -> Result<MFGSolution> {
    cfg.validate()?;
    let grid = *m0.grid();
    if grid != *u_terminal.grid() {
        return Err(Error::Shape("initial density and terminal data live on different grids".into()));
    }
    if let Some((index, &value)) = m0.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeDensity { index, value });
    }
    let theta = cfg.damping;
    let mut m = solve_fp_forward(m0, &SpaceTimeField::zeros(grid, time), params)?;
    let mut u = SpaceTimeField::broadcast(u_terminal, time);
    let mut history = Vec::new();
    let mut best: Option<(f64, SpaceTimeField, SpaceTimeField)> = None;

    for _ in 0..cfg.max_picard_iters {
        let u_new = solve_hjb_backward(u_terminal, &m, params)?;
        let m_hat = solve_fp_forward(m0, &u_new, params)?;
        let mut m_new = m_hat;
        for (new, old) in m_new.values_mut().iter_mut().zip(m.values()) {
            *new = theta * *new + (1.0 - theta) * old;
        }
        let residual = m_new.sup_distance(&m) + u_new.sup_distance(&u);
        history.push(residual);
        m = m_new;
        u = u_new;
        if best.as_ref().is_none_or(|b| residual <= b.0) {
            best = Some((residual, u.clone(), m.clone()));
        }
        if residual < cfg.picard_tol {
            return Ok(MFGSolution { u, m, iterations: history.len(), residual_history: history, converged: true });
        }
    }
    let (_, u, m) = best.expect("at least one Picard iteration");
    Ok(MFGSolution { u, m, iterations: history.len(), residual_history: history, converged: false })
}

/// Volatility and gradient-gain coefficients sampled on the grid.
pub(crate) struct Coefficients {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    /// `phi1^2 / a0` at nodes.
    pub k1: Vec<f64>,
    /// `phi2^2 / b0` at nodes.
    pub k2: Vec<f64>,
}

impl Coefficients {
    pub fn new(grid: &Grid, params: &ModelParams, collar: f64) -> Self {
        let (s1, s2) = params.sigma_profile(collar).on_grid(grid);
        let (k1, k2) = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                gains(params, x, y)
            })
            .unzip();
        Coefficients { s1, s2, k1, k2 }
    }
}

#[inline]
pub(crate) fn gains(params: &ModelParams, x: f64, y: f64) -> (f64, f64) {
    let (p1, p2) = (params.phi1(x, y), params.phi2(x, y));
    (p1 * p1 / params.a0_at(x, y), p2 * p2 / params.b0_at(x, y))
}

pub(crate) fn collar_width(grid: &Grid) -> f64 {
    2.0 * grid.hx().max(grid.hy())
}

pub(crate) fn check_level(v: &[f64]) -> std::result::Result<(), usize> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(i),
        None => Ok(()),
    }
}
