//! Forward Fokker-Planck solve.
//!
//! `m_t = 1/2 (s1 m)_xx + 1/2 (s2 m)_yy + (k1 m u_x)_x + (k2 m u_y)_y`,
//! i.e. transport with velocity `v = -(k1 u_x, k2 u_y)`. Each step applies
//! the explicit upwind transport (sub-cycled for positivity) and then the
//! implicit diffusion split by axis. The step is linear in `m`, and
//! [`FpOperator`] exposes both the step and its exact transpose.

use super::{check_level, collar_width, gains};
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::model::ModelParams;
use crate::tridiag::Tridiag;

/// Boundary treatment of the face `x = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpBoundary {
    /// `m = 0` on `x = 1`, zero flux elsewhere.
    Absorbing,
    /// Zero flux on every face (mass-conserving test variant).
    Reflecting,
}

/// Forward solve with the absorbing face `x = 1`.
pub fn solve_fp_forward(m0: &ScalarField, u: &SpaceTimeField, params: &ModelParams) -> Result<SpaceTimeField> {
    solve_fp_forward_with(m0, u, params, FpBoundary::Absorbing)
}

pub fn solve_fp_forward_with(m0: &ScalarField, u: &SpaceTimeField, params: &ModelParams, boundary: FpBoundary) -> Result<SpaceTimeField> {
    if m0.grid() != u.grid() {
        return Err(Error::Shape("initial density and value function live on different grids".into()));
    }
    if let Some((index, &value)) = m0.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeDensity { index, value });
    }
    FpOperator::new(u, params, boundary)?.propagate(m0)
}

/// Transport data of one time step: face velocities and sub-cycling.
#[derive(Clone, Debug)]
pub struct FpStep {
    /// Velocity on the face between `(i, j)` and `(i + 1, j)`, index `j (nx - 1) + i`.
    vx: Vec<f64>,
    /// Velocity on the face between `(i, j)` and `(i, j + 1)`, index `j nx + i`.
    vy: Vec<f64>,
    n_sub: usize,
    sub_dt: f64,
    /// Largest transport time step that keeps the update positive.
    stable_dt: f64,
}

impl FpStep {
    pub fn substeps(&self) -> usize {
        self.n_sub
    }
}

/// The sequence of linear FP step maps for a frozen value function.
#[derive(Clone, Debug)]
pub struct FpOperator {
    grid: Grid,
    time: TimeGrid,
    boundary: FpBoundary,
    wx: Vec<f64>,
    wy: Vec<f64>,
    rows: Vec<Tridiag>,
    cols: Vec<Tridiag>,
    rows_t: Vec<Tridiag>,
    cols_t: Vec<Tridiag>,
    steps: Vec<FpStep>,
}

impl FpOperator {
    pub fn new(u: &SpaceTimeField, params: &ModelParams, boundary: FpBoundary) -> Result<Self> {
        let grid = *u.grid();
        if grid.dim() != 2 {
            return Err(Error::Grid("the FP solver needs a two-dimensional grid".into()));
        }
        let time = *u.time();
        let (nx, ny) = (grid.nx(), grid.ny());
        let (hx, hy) = (grid.hx(), grid.hy());
        let dt = time.dt();
        let (s1, s2) = params.sigma_profile(collar_width(&grid)).on_grid(&grid);
        let absorbing = boundary == FpBoundary::Absorbing;

        let rows: Vec<Tridiag> = (0..ny)
            .map(|j| diffusion_matrix(&s1[j * nx..(j + 1) * nx], dt / (2.0 * hx * hx), absorbing))
            .collect();
        let active_cols = if absorbing { nx - 1 } else { nx };
        let cols: Vec<Tridiag> = (0..active_cols)
            .map(|i| {
                let s: Vec<f64> = (0..ny).map(|j| s2[j * nx + i]).collect();
                diffusion_matrix(&s, dt / (2.0 * hy * hy), false)
            })
            .collect();
        let rows_t = rows.iter().map(Tridiag::transpose).collect();
        let cols_t = cols.iter().map(Tridiag::transpose).collect();

        // face gains, sampled at face midpoints
        let kx: Vec<f64> = (0..ny)
            .flat_map(|j| (0..nx - 1).map(move |i| (i, j)))
            .map(|(i, j)| gains(params, grid.x(i) + 0.5 * hx, grid.y(j)).0)
            .collect();
        let ky: Vec<f64> = (0..ny - 1)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| gains(params, grid.x(i), grid.y(j) + 0.5 * hy).1)
            .collect();

        let (wx, wy) = (grid.weights_x(), grid.weights_y());
        let steps = (0..time.nt() - 1)
            .map(|n| {
                let lvl = u.level(n);
                let vx: Vec<f64> = (0..ny)
                    .flat_map(|j| (0..nx - 1).map(move |i| (i, j)))
                    .zip(&kx)
                    .map(|((i, j), k)| -k * (lvl[j * nx + i + 1] - lvl[j * nx + i]) / hx)
                    .collect();
                let vy: Vec<f64> = (0..ny - 1)
                    .flat_map(|j| (0..nx).map(move |i| (i, j)))
                    .zip(&ky)
                    .map(|((i, j), k)| -k * (lvl[(j + 1) * nx + i] - lvl[j * nx + i]) / hy)
                    .collect();
                let mut rate = 0.0_f64;
                for j in 0..ny {
                    for i in 0..nx {
                        let mut out = 0.0;
                        if i + 1 < nx {
                            out += vx[j * (nx - 1) + i].max(0.0) / wx[i];
                        }
                        if i > 0 {
                            out += (-vx[j * (nx - 1) + i - 1]).max(0.0) / wx[i];
                        }
                        if j + 1 < ny {
                            out += vy[j * nx + i].max(0.0) / wy[j];
                        }
                        if j > 0 {
                            out += (-vy[(j - 1) * nx + i]).max(0.0) / wy[j];
                        }
                        rate = rate.max(out);
                    }
                }
                let stable_dt = if rate > 0.0 { 1.0 / rate } else { f64::INFINITY };
                let n_sub = ((dt / (0.95 * stable_dt)).ceil() as usize).max(1);
                FpStep { vx, vy, n_sub, sub_dt: dt / n_sub as f64, stable_dt }
            })
            .collect();

        Ok(FpOperator { grid, time, boundary, wx, wy, rows, cols, rows_t, cols_t, steps })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn steps(&self) -> &[FpStep] {
        &self.steps
    }

    /// Smallest transport time step over all steps below which no
    /// sub-cycling is needed for positivity.
    pub fn stability_bound(&self) -> f64 {
        self.steps.iter().map(|s| s.stable_dt).fold(f64::INFINITY, f64::min)
    }

    fn is_dirichlet(&self, i: usize) -> bool {
        self.boundary == FpBoundary::Absorbing && i + 1 == self.grid.nx()
    }

    fn project(&self, v: &mut [f64]) {
        if self.boundary == FpBoundary::Absorbing {
            let nx = self.grid.nx();
            for j in 0..self.grid.ny() {
                v[j * nx + nx - 1] = 0.0;
            }
        }
    }

    /// Advances `m` from level `n` to level `n + 1` in place.
    pub fn step(&self, n: usize, m: &mut [f64]) {
        let step = &self.steps[n];
        let mut delta = vec![0.0; m.len()];
        self.project(m);
        for _ in 0..step.n_sub {
            self.transport(step, m, &mut delta);
        }
        let nx = self.grid.nx();
        let mut scratch = vec![0.0; nx.max(self.grid.ny())];
        for (j, r) in self.rows.iter().enumerate() {
            r.solve_strided(m, j * nx, 1, &mut scratch);
        }
        for (i, c) in self.cols.iter().enumerate() {
            c.solve_strided(m, i, nx, &mut scratch);
        }
    }

    /// Applies the transpose of [`FpOperator::step`] in place.
    pub fn step_transpose(&self, n: usize, w: &mut [f64]) {
        let step = &self.steps[n];
        let nx = self.grid.nx();
        let mut scratch = vec![0.0; nx.max(self.grid.ny())];
        for (i, c) in self.cols_t.iter().enumerate() {
            c.solve_strided(w, i, nx, &mut scratch);
        }
        for (j, r) in self.rows_t.iter().enumerate() {
            r.solve_strided(w, j * nx, 1, &mut scratch);
        }
        self.project(w);
        let mut delta = vec![0.0; w.len()];
        for _ in 0..step.n_sub {
            self.transport_transpose(step, w, &mut delta);
        }
        self.project(w);
    }

    /// One explicit upwind sub-step: `m <- m - sd div(v m)`.
    fn transport(&self, step: &FpStep, m: &mut [f64], delta: &mut [f64]) {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let sd = step.sub_dt;
        delta.iter_mut().for_each(|d| *d = 0.0);
        for j in 0..ny {
            for i in 0..nx - 1 {
                let (l, r) = (j * nx + i, j * nx + i + 1);
                let v = step.vx[j * (nx - 1) + i];
                let flux = sd * if v > 0.0 { v * m[l] } else { v * m[r] };
                delta[l] -= flux / self.wx[i];
                if !self.is_dirichlet(i + 1) {
                    delta[r] += flux / self.wx[i + 1];
                }
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                if self.is_dirichlet(i) {
                    continue;
                }
                let (l, r) = (j * nx + i, (j + 1) * nx + i);
                let v = step.vy[j * nx + i];
                let flux = sd * if v > 0.0 { v * m[l] } else { v * m[r] };
                delta[l] -= flux / self.wy[j];
                delta[r] += flux / self.wy[j + 1];
            }
        }
        m.iter_mut().zip(delta.iter()).for_each(|(a, d)| *a += d);
    }

    fn transport_transpose(&self, step: &FpStep, w: &mut [f64], delta: &mut [f64]) {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let sd = step.sub_dt;
        delta.iter_mut().for_each(|d| *d = 0.0);
        for j in 0..ny {
            for i in 0..nx - 1 {
                let (l, r) = (j * nx + i, j * nx + i + 1);
                let v = step.vx[j * (nx - 1) + i];
                let mut g = -w[l] / self.wx[i];
                if !self.is_dirichlet(i + 1) {
                    g += w[r] / self.wx[i + 1];
                }
                if v > 0.0 {
                    delta[l] += sd * v * g;
                } else {
                    delta[r] += sd * v * g;
                }
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                if self.is_dirichlet(i) {
                    continue;
                }
                let (l, r) = (j * nx + i, (j + 1) * nx + i);
                let v = step.vy[j * nx + i];
                let g = -w[l] / self.wy[j] + w[r] / self.wy[j + 1];
                if v > 0.0 {
                    delta[l] += sd * v * g;
                } else {
                    delta[r] += sd * v * g;
                }
            }
        }
        w.iter_mut().zip(delta.iter()).for_each(|(a, d)| *a += d);
    }

    /// Full trajectory from `m0`, with finiteness and positivity checks.
    pub fn propagate(&self, m0: &ScalarField) -> Result<SpaceTimeField> {
        if *m0.grid() != self.grid {
            return Err(Error::Shape("initial density does not match the operator grid".into()));
        }
        let mut out = SpaceTimeField::zeros(self.grid, self.time);
        out.set_level(0, m0.values());
        let mut m = m0.values().to_vec();
        for n in 0..self.steps.len() {
            self.step(n, &mut m);
            check_level(&m).map_err(|_| Error::BlowUp { step: n })?;
            let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let min = m.iter().copied().fold(f64::INFINITY, f64::min);
            if min < -1e-8 * scale {
                return Err(Error::Positivity { step: n, min });
            }
            out.set_level(n + 1, &m);
        }
        Ok(out)
    }

    /// Full trajectory without sign checks (the map is linear in `m0`).
    pub fn trajectory(&self, m0: &[f64]) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(self.grid, self.time);
        out.set_level(0, m0);
        let mut m = m0.to_vec();
        for n in 0..self.steps.len() {
            self.step(n, &mut m);
            out.set_level(n + 1, &m);
        }
        out
    }

    /// Terminal level only; linear in `m0` with no sign checks.
    pub fn apply(&self, m0: &[f64]) -> Vec<f64> {
        let mut m = m0.to_vec();
        for n in 0..self.steps.len() {
            self.step(n, &mut m);
        }
        m
    }

    /// Transpose of [`FpOperator::apply`].
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let mut v = w.to_vec();
        for n in (0..self.steps.len()).rev() {
            self.step_transpose(n, &mut v);
        }
        v
    }
}

/// `I - r D(s .)` along one line, ghost-node Neumann at the start and either
/// Neumann or an identity (Dirichlet) row at the end.
fn diffusion_matrix(s: &[f64], r: f64, dirichlet_end: bool) -> Tridiag {
    let n = s.len();
    let mut m = Tridiag::identity(n);
    let last = if dirichlet_end { n - 1 } else { n };
    for i in 0..last {
        m.diag[i] = 1.0 + 2.0 * r * s[i];
        if i == 0 {
            m.upper[0] = -2.0 * r * s[1];
        } else if i == n - 1 {
            m.lower[i] = -2.0 * r * s[n - 2];
        } else {
            m.lower[i] = -r * s[i - 1];
            m.upper[i] = -r * s[i + 1];
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::integrate_space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, nt: usize) -> (Grid, TimeGrid, ModelParams) {
        (Grid::unit_square(n, n).unwrap(), TimeGrid::new(2.0, nt).unwrap(), ModelParams::default())
    }

    fn gaussian(grid: Grid, cx: f64, cy: f64) -> ScalarField {
        ScalarField::from_fn(grid, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.02).exp())
    }

    fn masses(m: &SpaceTimeField) -> Vec<f64> {
        (0..m.time().nt()).map(|n| integrate_space(&m.level_field(n)).unwrap()).collect()
    }

    #[test]
    fn zero_initial_density_stays_zero() {
        let (g, t, p) = setup(9, 9);
        let u = SpaceTimeField::from_fn(g, t, |x, y, _| x * y);
        let m = solve_fp_forward(&ScalarField::zeros(g), &u, &p).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn reflecting_transport_conserves_mass() {
        let (g, t, p) = setup(17, 33);
        let u = SpaceTimeField::from_fn(g, t, |x, y, s| (1.0 + s) * (x - 0.5 * y * y));
        let m = solve_fp_forward_with(&gaussian(g, 0.5, 0.5), &u, &p, FpBoundary::Reflecting).unwrap();
        let mass = masses(&m);
        for v in &mass {
            assert!((v - mass[0]).abs() < 1e-12 * mass[0].max(1.0), "{v} vs {}", mass[0]);
        }
        assert!(m.min() >= 0.0);
    }

    #[test]
    fn absorbing_mass_decreases() {
        let (g, t, p) = setup(17, 33);
        let u = SpaceTimeField::broadcast(&ScalarField::from_fn(g, |x, y| p.psi(x, y)), t);
        let m = solve_fp_forward(&gaussian(g, 0.8, 0.5), &u, &p).unwrap();
        let mass = masses(&m);
        for w in mass.windows(2) {
            assert!(w[1] < w[0]);
        }
        for n in 1..t.nt() {
            for j in 0..g.ny() {
                assert_eq!(m.level(n)[g.idx(g.nx() - 1, j)], 0.0);
            }
        }
    }

    #[test]
    fn transpose_passes_dot_product_test() {
        let (g, t, p) = setup(9, 7);
        let u = SpaceTimeField::from_fn(g, t, |x, y, s| 3.0 * (1.0 + s) * (x * x - y + x * y));
        for boundary in [FpBoundary::Absorbing, FpBoundary::Reflecting] {
            let op = FpOperator::new(&u, &p, boundary).unwrap();
            assert!(op.steps().iter().any(|s| s.substeps() > 1) || boundary == FpBoundary::Reflecting);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..5 {
                let a: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs: f64 = op.apply(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
                let rhs: f64 = a.iter().zip(op.apply_transpose(&b)).map(|(x, y)| x * y).sum();
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()), "{lhs} {rhs}");
            }
        }
    }
}
