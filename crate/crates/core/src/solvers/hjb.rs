//! Backward Hamilton-Jacobi-Bellman solve.
//!
//! `u_t + s1/2 u_xx + s2/2 u_yy - k1/2 u_x^2 - k2/2 u_y^2 - c + G[m] = 0`
//! with `k1 = phi1^2 / a0`, `k2 = phi2^2 / b0`, marched from `u(T) = u_T`
//! backward. Diffusion is implicit and split by axis; the gradient terms and
//! the source use the later time level.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};

use super::{check_level, collar_width, Coefficients};
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, SpaceTimeField};
use crate::model::ModelParams;
use crate::tridiag::Tridiag;

/// The first step-size warning goes out at warn level, later ones at debug.
static CFL_WARNED: AtomicBool = AtomicBool::new(false);

/// Solves the HJB equation backward from `u_T` given the density `m` on
/// every time level. `u = Psi` on `x = 1`, zero normal derivative elsewhere.
pub fn solve_hjb_backward(u_terminal: &ScalarField, m: &SpaceTimeField, params: &ModelParams) -> Result<SpaceTimeField> {
    let grid = *u_terminal.grid();
    if grid != *m.grid() {
        return Err(Error::Shape("terminal data and density live on different grids".into()));
    }
    if grid.dim() != 2 {
        return Err(Error::Grid("the HJB solver needs a two-dimensional grid".into()));
    }
    let time = *m.time();
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let dt = time.dt();
    let nt = time.nt();
    let coef = Coefficients::new(&grid, params, collar_width(&grid));

    let mats = HjbMatrices::new(&grid, &coef, dt);
    let dirichlet: Vec<f64> = (0..ny).map(|j| params.psi(1.0, grid.y(j))).collect();

    let mut u = SpaceTimeField::zeros(grid, time);
    let mut level = u_terminal.values().to_vec();
    for (j, v) in dirichlet.iter().enumerate() {
        level[grid.idx(nx - 1, j)] = *v;
    }
    u.set_level(nt - 1, u_terminal.values());

    let mut warned = false;
    let mut clipped = vec![0.0; grid.len()];
    let mut scratch = vec![0.0; nx.max(ny)];
    for n in (0..nt - 1).rev() {
        let t_next = time.t(n + 1);
        for (c, v) in clipped.iter_mut().zip(m.level(n + 1)) {
            *c = v.max(0.0);
        }
        let mf = params.mean_fields_unchecked(&grid, &clipped);
        let mut rhs = level.clone();
        let mut max_speed = 0.0_f64;
        for j in 0..ny {
            for i in 0..nx - 1 {
                let k = grid.idx(i, j);
                let ux = if i == 0 { 0.0 } else { (level[k + 1] - level[k - 1]) / (2.0 * hx) };
                let uy = if j == 0 || j == ny - 1 { 0.0 } else { (level[k + nx] - level[k - nx]) / (2.0 * hy) };
                let (x, y) = (grid.x(i), grid.y(j));
                let g = params.g(x - mf.mbar_y[i], y - mf.mbar_x[j]);
                let source = -0.5 * coef.k1[k] * ux * ux - 0.5 * coef.k2[k] * uy * uy - params.income(x, y, t_next) + g;
                rhs[k] += dt * source;
                max_speed = max_speed.max(coef.k1[k] * ux.abs() / hx + coef.k2[k] * uy.abs() / hy);
            }
            rhs[grid.idx(nx - 1, j)] = dirichlet[j];
        }
        if !warned && dt * max_speed > 1.0 {
            let msg = format!("HJB step {n}: dt = {dt:.3e} exceeds the explicit gradient-term estimate {:.3e}", 1.0 / max_speed);
            if CFL_WARNED.swap(true, Ordering::Relaxed) {
                debug!("{msg}");
            } else {
                warn!("{msg} (further occurrences are logged at debug level)");
            }
            warned = true;
        }
        mats.solve(&grid, &mut rhs, &mut scratch);
        check_level(&rhs).map_err(|_| Error::BlowUp { step: n })?;
        u.set_level(n, &rhs);
        level = rhs;
    }
    Ok(u)
}

/// `(I - dt s1/2 D_xx)` per row and `(I - dt s2/2 D_yy)` per column, with a
/// Dirichlet row at `x = 1` and ghost-node Neumann rows elsewhere.
struct HjbMatrices {
    rows: Vec<Tridiag>,
    cols: Vec<Tridiag>,
}

impl HjbMatrices {
    fn new(grid: &Grid, coef: &Coefficients, dt: f64) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let (rx, ry) = (dt / (grid.hx() * grid.hx()), dt / (grid.hy() * grid.hy()));
        let rows = (0..ny)
            .map(|j| {
                let mut m = Tridiag::identity(nx);
                for i in 0..nx - 1 {
                    let d = 0.5 * coef.s1[grid.idx(i, j)] * rx;
                    m.diag[i] = 1.0 + 2.0 * d;
                    if i == 0 {
                        m.upper[0] = -2.0 * d;
                    } else {
                        m.lower[i] = -d;
                        m.upper[i] = -d;
                    }
                }
                m
            })
            .collect();
        let cols = (0..nx - 1)
            .map(|i| {
                let mut m = Tridiag::identity(ny);
                for j in 0..ny {
                    let d = 0.5 * coef.s2[grid.idx(i, j)] * ry;
                    m.diag[j] = 1.0 + 2.0 * d;
                    if j == 0 {
                        m.upper[0] = -2.0 * d;
                    } else if j == ny - 1 {
                        m.lower[j] = -2.0 * d;
                    } else {
                        m.lower[j] = -d;
                        m.upper[j] = -d;
                    }
                }
                m
            })
            .collect();
        HjbMatrices { rows, cols }
    }

    fn solve(&self, grid: &Grid, v: &mut [f64], scratch: &mut [f64]) {
        let nx = grid.nx();
        for (j, m) in self.rows.iter().enumerate() {
            m.solve_strided(v, j * nx, 1, scratch);
        }
        for (i, m) in self.cols.iter().enumerate() {
            m.solve_strided(v, i, nx, scratch);
        }
    }
}
