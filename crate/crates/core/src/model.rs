//! Coefficients, costs, mean-field averages and optimal feedback of the
//! corruption-hierarchy model.
//!
//! The state of an agent is `(x, y)` in the unit square: `x` is the degree of
//! corruption and `y` the position in the hierarchy. The value function `u`
//! and density `m` couple through the averages
//!
//! ```text
//! mbar_y(x,t) = (eps + int m dy)^-1 int y m dy
//! mbar_x(y,t) = (eps + int m dx)^-1 int x m dx
//! ```
//!
//! which enter the running cost through `g(x - mbar_y, y - mbar_x)` with
//! `g(u, v) = a1 u^2 / 2 + b1 v^2 / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Coefficient;
use crate::grid::{gradient, Grid, ScalarField};

/// Sign of the cross term in the control gains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `phi1 = a x [(1 - x) + p1 y]`: position in the hierarchy speeds up corruption.
    Plus,
    /// `phi1 = a x [(1 - x) - p1 y]`: corruption slows career moves.
    Minus,
}

/// Income `c(x, y, t) = p(y, t) + q(x, y, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum Income {
    /// `p = p0 (1 + y)(1 + r t)`, `q = q0 x (1 + y)`.
    Standard { p0: f64, q0: f64, r: f64 },
    Expr(Coefficient),
}

impl Income {
    #[inline]
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self {
            Income::Standard { p0, q0, r } => p0 * (1.0 + y) * (1.0 + r * t) + q0 * x * (1.0 + y),
            Income::Expr(c) => c.eval(x, y, t),
        }
    }

    pub fn zero() -> Self {
        Income::Standard { p0: 0.0, q0: 0.0, r: 0.0 }
    }
}

/// Every coefficient and constant of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub a: f64,
    pub b: f64,
    pub p1: f64,
    pub p2: f64,
    pub variant: Variant,
    pub a0: Coefficient,
    pub b0: Coefficient,
    pub sigma1_sq: Coefficient,
    pub sigma2_sq: Coefficient,
    pub epsilon: f64,
    pub g_a1: f64,
    pub g_b1: f64,
    pub income: Income,
    /// Terminal and exit cost. It is added to the minimized cost, so
    /// positive values penalize.
    pub psi: Coefficient,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            a: 1.0,
            b: 1.0,
            p1: 0.5,
            p2: 0.5,
            variant: Variant::Plus,
            a0: Coefficient::Const(1.0),
            b0: Coefficient::Const(1.0),
            sigma1_sq: Coefficient::Const(0.2),
            sigma2_sq: Coefficient::Const(0.2),
            epsilon: 0.1,
            g_a1: 0.5,
            g_b1: 0.5,
            income: Income::Standard { p0: 0.2, q0: 0.3, r: 0.1 },
            psi: Coefficient::Expr(crate::expr::Expression::parse("0.5*x - 0.25*y").expect("valid literal")),
            horizon: 2.0,
        }
    }
}

/// Averages of the density along each axis at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFields {
    /// `mbar_y(x_i)`, one entry per `x` node.
    pub mbar_y: Vec<f64>,
    /// `mbar_x(y_j)`, one entry per `y` node.
    pub mbar_x: Vec<f64>,
}

impl MeanFields {
    /// Linear interpolation of both averages at an arbitrary point.
    pub fn at(&self, x: f64, y: f64) -> (f64, f64) {
        (lerp_axis(&self.mbar_y, x), lerp_axis(&self.mbar_x, y))
    }
}

fn lerp_axis(v: &[f64], s: f64) -> f64 {
    let n = v.len();
    let p = (s.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64);
    let i = (p.floor() as usize).min(n - 2);
    let w = p - i as f64;
    (1.0 - w) * v[i] + w * v[i + 1]
}

/// Volatilities with the near-boundary collar applied: inside a band of
/// width `collar` along the boundary each coefficient is replaced by its
/// mean over the boundary, so it is constant near the boundary.
#[derive(Clone, Debug)]
pub struct SigmaProfile {
    sigma1_sq: Coefficient,
    sigma2_sq: Coefficient,
    collar: f64,
    boundary1: f64,
    boundary2: f64,
}

impl SigmaProfile {
    #[inline]
    pub fn at(&self, x: f64, y: f64) -> (f64, f64) {
        match (self.sigma1_sq.as_const(), self.sigma2_sq.as_const()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                let dist = x.min(1.0 - x).min(y).min(1.0 - y);
                if dist <= self.collar {
                    (self.boundary1, self.boundary2)
                } else {
                    (self.sigma1_sq.eval(x, y, 0.0), self.sigma2_sq.eval(x, y, 0.0))
                }
            }
        }
    }

    /// `(sigma1^2, sigma2^2)` at every node.
    pub fn on_grid(&self, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
        (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                self.at(x, y)
            })
            .unzip()
    }
}

fn boundary_mean(c: &Coefficient) -> f64 {
    const N: usize = 64;
    let mut sum = 0.0;
    for k in 0..N {
        let s = (k as f64 + 0.5) / N as f64;
        sum += c.eval(s, 0.0, 0.0) + c.eval(s, 1.0, 0.0) + c.eval(0.0, s, 0.0) + c.eval(1.0, s, 0.0);
    }
    sum / (4 * N) as f64
}

const SAMPLES: usize = 33;

fn sample_min(c: &Coefficient) -> f64 {
    let mut lo = f64::INFINITY;
    for i in 0..SAMPLES {
        for j in 0..SAMPLES {
            let (x, y) = (i as f64 / (SAMPLES - 1) as f64, j as f64 / (SAMPLES - 1) as f64);
            let v = c.eval(x, y, 0.0);
            lo = if v.is_nan() { f64::NAN } else { lo.min(v) };
        }
    }
    lo
}

impl ModelParams {
    /// Checks every invariant and names the first violated field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("p1", self.p1),
            ("p2", self.p2),
            ("epsilon", self.epsilon),
            ("g_a1", self.g_a1),
            ("g_b1", self.g_b1),
            ("T", self.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "> 0", v));
            }
        }
        for (name, c) in [("a0", &self.a0), ("b0", &self.b0), ("sigma1_sq", &self.sigma1_sq), ("sigma2_sq", &self.sigma2_sq)] {
            let lo = sample_min(c);
            if !(lo > 0.0) {
                return Err(Error::invalid(name, "> 0 everywhere on the unit square", lo));
            }
        }
        if !sample_min(&self.psi).is_finite() {
            return Err(Error::invalid("psi", "finite on the unit square", "NaN"));
        }
        let income_ok = (0..SAMPLES).all(|i| {
            let s = i as f64 / (SAMPLES - 1) as f64;
            self.income.eval(s, 1.0 - s, s * self.horizon).is_finite()
        });
        if !income_ok {
            return Err(Error::invalid("income", "finite on the unit square", "NaN"));
        }
        Ok(())
    }

    /// Lower volatility bound: `sigma_i^2 >= 2 sigma0` on the sampled square.
    pub fn sigma0(&self) -> f64 {
        0.5 * sample_min(&self.sigma1_sq).min(sample_min(&self.sigma2_sq))
    }

    pub fn sigma_profile(&self, collar: f64) -> SigmaProfile {
        SigmaProfile {
            sigma1_sq: self.sigma1_sq.clone(),
            sigma2_sq: self.sigma2_sq.clone(),
            collar,
            boundary1: boundary_mean(&self.sigma1_sq),
            boundary2: boundary_mean(&self.sigma2_sq),
        }
    }

    #[inline]
    pub fn phi1(&self, x: f64, y: f64) -> f64 {
        match self.variant {
            Variant::Plus => self.a * x * ((1.0 - x) + self.p1 * y),
            Variant::Minus => self.a * x * ((1.0 - x) - self.p1 * y),
        }
    }

    #[inline]
    pub fn phi2(&self, x: f64, y: f64) -> f64 {
        match self.variant {
            Variant::Plus => self.b * y * ((1.0 - y) + self.p2 * x),
            Variant::Minus => self.b * y * ((1.0 - y) - self.p2 * x),
        }
    }

    #[inline]
    pub fn a0_at(&self, x: f64, y: f64) -> f64 {
        self.a0.eval(x, y, 0.0)
    }

    #[inline]
    pub fn b0_at(&self, x: f64, y: f64) -> f64 {
        self.b0.eval(x, y, 0.0)
    }

    /// Control cost `h = a0 alpha^2 / 2 + b0 beta^2 / 2`.
    #[inline]
    pub fn running_cost_h(&self, alpha: f64, beta: f64, x: f64, y: f64) -> f64 {
        0.5 * self.a0_at(x, y) * alpha * alpha + 0.5 * self.b0_at(x, y) * beta * beta
    }

    #[inline]
    pub fn income(&self, x: f64, y: f64, t: f64) -> f64 {
        self.income.eval(x, y, t)
    }

    #[inline]
    pub fn psi(&self, x: f64, y: f64) -> f64 {
        self.psi.eval(x, y, 0.0)
    }

    /// `g(u, v) = a1 u^2 / 2 + b1 v^2 / 2`.
    #[inline]
    pub fn g(&self, u: f64, v: f64) -> f64 {
        0.5 * self.g_a1 * u * u + 0.5 * self.g_b1 * v * v
    }

    /// Weighted averages of a nonnegative density at one time level.
    pub fn mean_fields(&self, m: &ScalarField) -> Result<MeanFields> {
        let grid = m.grid();
        if grid.dim() != 2 {
            return Err(Error::Grid("mean fields need a two-dimensional grid".into()));
        }
        if let Some((index, &value)) = m.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NegativeDensity { index, value });
        }
        Ok(self.mean_fields_unchecked(grid, m.values()))
    }

    pub(crate) fn mean_fields_unchecked(&self, grid: &Grid, m: &[f64]) -> MeanFields {
        let (nx, ny) = (grid.nx(), grid.ny());
        let wx = grid.weights_x();
        let wy = grid.weights_y();
        let mut mbar_y = vec![0.0; nx];
        for (i, out) in mbar_y.iter_mut().enumerate() {
            let (mut mass, mut first) = (0.0, 0.0);
            for j in 0..ny {
                let v = m[j * nx + i];
                mass += wy[j] * v;
                first += wy[j] * grid.y(j) * v;
            }
            *out = first / (self.epsilon + mass);
        }
        let mut mbar_x = vec![0.0; ny];
        for (j, out) in mbar_x.iter_mut().enumerate() {
            let row = &m[j * nx..(j + 1) * nx];
            let (mut mass, mut first) = (0.0, 0.0);
            for (i, v) in row.iter().enumerate() {
                mass += wx[i] * v;
                first += wx[i] * grid.x(i) * v;
            }
            *out = first / (self.epsilon + mass);
        }
        MeanFields { mbar_y, mbar_x }
    }

    /// Coupling `G = g(x - mbar_y(x), y - mbar_x(y))` at a point.
    #[inline]
    pub fn coupling_g(&self, x: f64, y: f64, mf: &MeanFields) -> f64 {
        let (my, mx) = mf.at(x, y);
        self.g(x - my, y - mx)
    }

    /// Coupling term at every node of the density's grid.
    pub fn coupling_field(&self, m: &ScalarField) -> Result<ScalarField> {
        let mf = self.mean_fields(m)?;
        Ok(self.coupling_from_means(m.grid(), &mf))
    }

    pub(crate) fn coupling_from_means(&self, grid: &Grid, mf: &MeanFields) -> ScalarField {
        let nx = grid.nx();
        let values = (0..grid.len())
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                self.g(grid.x(i) - mf.mbar_y[i], grid.y(j) - mf.mbar_x[j])
            })
            .collect();
        ScalarField::new(*grid, values).expect("coupling of a finite density is finite")
    }

    /// Largest grid ratio `|G[m1] - G[m2]| / (|d mbar_y| + |d mbar_x|)` over
    /// nodes whose denominator exceeds `1e-12`; zero if there are none.
    pub fn coupling_lipschitz_bound(&self, m1: &ScalarField, m2: &ScalarField) -> Result<f64> {
        let grid = m1.grid();
        let f1 = self.mean_fields(m1)?;
        let f2 = self.mean_fields(m2)?;
        let nx = grid.nx();
        let mut best = 0.0_f64;
        for k in 0..grid.len() {
            let (i, j) = (k % nx, k / nx);
            let (x, y) = (grid.x(i), grid.y(j));
            let dy = (f1.mbar_y[i] - f2.mbar_y[i]).abs();
            let dx = (f1.mbar_x[j] - f2.mbar_x[j]).abs();
            let denom = dx + dy;
            if denom > 1e-12 {
                let num = (self.g(x - f1.mbar_y[i], y - f1.mbar_x[j]) - self.g(x - f2.mbar_y[i], y - f2.mbar_x[j])).abs();
                best = best.max(num / denom);
            }
        }
        Ok(best)
    }

    /// Minimizer of the Hamiltonian over unconstrained controls given the
    /// costate `p = grad u`.
    #[inline]
    pub fn optimal_controls(&self, x: f64, y: f64, p: (f64, f64)) -> (f64, f64) {
        (-self.phi1(x, y) / self.a0_at(x, y) * p.0, -self.phi2(x, y) / self.b0_at(x, y) * p.1)
    }

    /// Feedback controls at every node, computed from the grid gradient of `u`.
    pub fn optimal_controls_field(&self, u: &ScalarField) -> (ScalarField, ScalarField) {
        let grid = *u.grid();
        let grad = gradient(u);
        let uy = if grid.dim() == 2 { grad[1].values().to_vec() } else { vec![0.0; grid.len()] };
        let (alpha, beta): (Vec<f64>, Vec<f64>) = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                self.optimal_controls(x, y, (grad[0].values()[k], uy[k]))
            })
            .unzip();
        (ScalarField::new(grid, alpha).expect("finite"), ScalarField::new(grid, beta).expect("finite"))
    }

    /// `alpha phi1 p1 + beta phi2 p2 - c + h(alpha, beta) + G`, where
    /// `coupling` is the already evaluated `G`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian(&self, x: f64, y: f64, t: f64, coupling: f64, p: (f64, f64), alpha: f64, beta: f64) -> f64 {
        alpha * self.phi1(x, y) * p.0 + beta * self.phi2(x, y) * p.1 - self.income(x, y, t)
            + self.running_cost_h(alpha, beta, x, y)
            + coupling
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn phi_examples() {
        let mut p = params();
        p.a = 1.0;
        p.p1 = 0.5;
        assert_relative_eq!(p.phi1(0.5, 0.5), 0.375, epsilon = 1e-15);
        assert_eq!(p.phi1(0.0, 0.7), 0.0);
        p.variant = Variant::Minus;
        assert_eq!(p.phi1(0.0, 0.7), 0.0);
        p.p1 = 1.0;
        assert_eq!(p.phi1(0.5, 0.5), 0.0);
    }

    #[test]
    fn running_cost_examples() {
        let p = params();
        assert_eq!(p.running_cost_h(0.0, 0.0, 0.3, 0.3), 0.0);
        assert_relative_eq!(p.running_cost_h(1.0, 1.0, 0.3, 0.3), 1.0);
        let mut bad = params();
        bad.a0 = 2.0.into();
        bad.b0 = 0.0.into();
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("b0"), "{err}");
    }

    #[test]
    fn validate_names_field() {
        let mut p = params();
        p.epsilon = 0.0;
        assert_eq!(p.validate().unwrap_err().to_string(), "epsilon must be > 0 (got 0)");
        assert!(params().validate().is_ok());
    }

    #[test]
    fn mean_fields_examples() {
        let g = Grid::unit_square(33, 33).unwrap();
        let p = params();
        let mf = p.mean_fields(&ScalarField::zeros(g)).unwrap();
        assert!(mf.mbar_y.iter().chain(&mf.mbar_x).all(|v| *v == 0.0));
        let mf = p.mean_fields(&ScalarField::constant(g, 1.0)).unwrap();
        for v in mf.mbar_y.iter().chain(&mf.mbar_x) {
            assert_relative_eq!(*v, 0.5 / 1.1, epsilon = 1e-14);
        }
        let mut neg = ScalarField::constant(g, 1.0);
        neg.values_mut()[7] = -1e-3;
        assert!(matches!(p.mean_fields(&neg), Err(Error::NegativeDensity { index: 7, .. })));
    }

    #[test]
    fn mean_fields_of_narrow_bump() {
        // brute force: fine 1-D quadrature of y*m and m for the same bump
        let g = Grid::unit_square(129, 129).unwrap();
        let mut p = params();
        p.epsilon = 1e-3;
        let w = 0.03;
        let bump = |y: f64| (-(y - 0.8_f64).powi(2) / (2.0 * w * w)).exp();
        let m = ScalarField::from_fn(g, |_, y| bump(y));
        let mf = p.mean_fields(&m).unwrap();
        let n = 200_000;
        let (mut mass, mut first) = (0.0, 0.0);
        for k in 0..n {
            let y = (k as f64 + 0.5) / n as f64;
            mass += bump(y) / n as f64;
            first += y * bump(y) / n as f64;
        }
        let expected = first / (p.epsilon + mass);
        assert_relative_eq!(mf.mbar_y[40], expected, max_relative = 1e-4);
        assert!((expected - 0.8 * mass / (p.epsilon + mass)).abs() < 1e-3);
    }

    #[test]
    fn coupling_examples() {
        let g = Grid::unit_square(33, 33).unwrap();
        let mut p = params();
        p.g_a1 = 1.0;
        p.g_b1 = 1.0;
        let zero = p.coupling_field(&ScalarField::zeros(g)).unwrap();
        assert_relative_eq!(zero.at(16, 8), 0.5 * 0.25 + 0.5 * 0.0625, epsilon = 1e-15);
        let one = p.coupling_field(&ScalarField::constant(g, 1.0)).unwrap();
        let expected = (0.5_f64 - 0.5 / 1.1).powi(2);
        assert_relative_eq!(one.at(16, 16), expected, epsilon = 1e-14);
        assert!((expected - 0.002066).abs() < 1e-6);
        // G vanishes where the state equals the averages
        let mf = MeanFields { mbar_y: vec![0.3; 33], mbar_x: vec![0.6; 33] };
        assert_eq!(p.coupling_g(0.3, 0.6, &mf), 0.0);
    }

    #[test]
    fn lipschitz_examples() {
        let g = Grid::unit_square(17, 17).unwrap();
        let p = params();
        let one = ScalarField::constant(g, 1.0);
        assert_eq!(p.coupling_lipschitz_bound(&one, &one).unwrap(), 0.0);
        let b = p.coupling_lipschitz_bound(&one, &ScalarField::zeros(g)).unwrap();
        assert!(b.is_finite() && b > 0.0);
    }

    #[test]
    fn controls_examples() {
        let g = Grid::unit_square(5, 5).unwrap();
        let p = params();
        let (a, b) = p.optimal_controls_field(&ScalarField::constant(g, 2.0));
        assert_eq!(a.max_abs(), 0.0);
        assert_eq!(b.max_abs(), 0.0);
        let (a, _) = p.optimal_controls_field(&ScalarField::from_fn(g, |x, _| x));
        assert_relative_eq!(a.at(2, 2), -0.375, epsilon = 1e-14);
        assert_eq!(a.at(0, 3), 0.0);
    }

    #[test]
    fn hamiltonian_vanishes_at_origin() {
        let mut p = params();
        p.income = Income::zero();
        assert_eq!(p.hamiltonian(0.0, 0.0, 0.3, 0.0, (1.0, -2.0), 0.0, 0.0), 0.0);
    }

    #[test]
    fn hamiltonian_grid_search_matches_feedback() {
        let p = params();
        let (x, y, t) = (0.4, 0.7, 0.5);
        let costate = (0.8, -1.3);
        let (a_star, b_star) = p.optimal_controls(x, y, costate);
        // H separates in alpha and beta, so each can be searched on its own line
        let search = |f: &dyn Fn(f64) -> f64| {
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=10_000 {
                let c = -5.0 + k as f64 * 1e-3;
                let v = f(c);
                if v < best.0 {
                    best = (v, c);
                }
            }
            best.1
        };
        let a = search(&|c| p.hamiltonian(x, y, t, 0.0, costate, c, b_star));
        let b = search(&|c| p.hamiltonian(x, y, t, 0.0, costate, a_star, c));
        assert!((a - a_star).abs() <= 1e-3);
        assert!((b - b_star).abs() <= 1e-3);
        let h_star = p.hamiltonian(x, y, t, 0.0, costate, a_star, b_star);
        for c in [-2.0, -0.1, 0.0, 0.3, 4.0] {
            assert!(p.hamiltonian(x, y, t, 0.0, costate, c, b_star) >= h_star);
        }
    }

    #[test]
    fn config_round_trip_keeps_names() {
        let p = params();
        let json = serde_json::to_value(&p).unwrap();
        for key in ["a", "b", "p1", "p2", "variant", "a0", "b0", "sigma1_sq", "sigma2_sq", "epsilon", "g_a1", "g_b1", "income", "psi", "T"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["variant"], "plus");
        let back: ModelParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn sigma_collar_freezes_boundary_values() {
        let mut p = params();
        p.sigma1_sq = serde_json::from_str("\"0.2 + 0.1*x*y\"").unwrap();
        let prof = p.sigma_profile(0.1);
        let (near, _) = prof.at(0.05, 0.5);
        let (edge, _) = prof.at(0.95, 0.5);
        assert_eq!(near, edge);
        let (inner, _) = prof.at(0.5, 0.5);
        assert_relative_eq!(inner, 0.225, epsilon = 1e-15);
    }
}
