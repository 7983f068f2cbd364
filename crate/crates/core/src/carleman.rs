//! Numerical checks of weighted parabolic (Carleman) inequalities with the
//! weight `phi(t) = exp(lambda (t + 2)^s)`.
//!
//! Test functions are sums of `A cos((k + 1/2) pi x) cos(j pi y) tau(t)`:
//! they vanish on `x = 1` and have zero normal derivative on the other faces.
//! Derivatives are exact; only the integrals are numerical. Every weighted
//! integral is reported multiplied by `exp(-2 lambda (T + 2)^s)`, a common
//! positive factor that keeps the numbers finite without changing any sign.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Coefficient;
use crate::grid::Grid;

/// `(lambda, s)` of the weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub lambda: f64,
    pub s: f64,
}

impl CarlemanParams {
    pub fn new(lambda: f64, s: f64) -> Result<Self> {
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", ">= 1", lambda));
        }
        if !(s > 1.0 && s.is_finite()) {
            return Err(Error::invalid("s", "> 1", s));
        }
        Ok(CarlemanParams { lambda, s })
    }

    pub fn log_cwf(&self, t: f64) -> f64 {
        self.lambda * (t + 2.0).powf(self.s)
    }
}

/// `exp(lambda (t + 2)^s)`; refuses exponents above 700.
pub fn cwf(t: f64, cp: &CarlemanParams) -> Result<f64> {
    let e = cp.log_cwf(t);
    if e > 700.0 {
        return Err(Error::invalid("lambda (t + 2)^s", "<= 700 for a direct evaluation", e));
    }
    Ok(e.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeFactor {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "t")]
    Linear,
    #[serde(rename = "1+t")]
    OnePlusT,
    #[serde(rename = "exp(-t)")]
    ExpMinus,
    #[serde(rename = "exp(t)")]
    ExpPlus,
    #[serde(rename = "sin(t)")]
    Sin,
}

impl TimeFactor {
    pub const ALL: [TimeFactor; 6] =
        [TimeFactor::One, TimeFactor::Linear, TimeFactor::OnePlusT, TimeFactor::ExpMinus, TimeFactor::ExpPlus, TimeFactor::Sin];

    /// `(tau(t), tau'(t))`.
    #[inline]
    pub fn eval(self, t: f64) -> (f64, f64) {
        match self {
            TimeFactor::One => (1.0, 0.0),
            TimeFactor::Linear => (t, 1.0),
            TimeFactor::OnePlusT => (1.0 + t, 1.0),
            TimeFactor::ExpMinus => ((-t).exp(), -(-t).exp()),
            TimeFactor::ExpPlus => (t.exp(), t.exp()),
            TimeFactor::Sin => (t.sin(), t.cos()),
        }
    }
}

/// One separable term `amplitude cos((k + 1/2) pi x) cos(j pi y) tau(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub k: u32,
    pub j: u32,
    pub time: TimeFactor,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    /// Spatial dimension, 1 or 2. In one dimension `j` is ignored.
    pub dim: usize,
    pub terms: Vec<Term>,
}

impl TestFunction {
    pub fn zero(dim: usize) -> Self {
        TestFunction { dim, terms: Vec::new() }
    }

    pub fn mode(dim: usize, k: u32, j: u32, time: TimeFactor, amplitude: f64) -> Self {
        TestFunction { dim, terms: vec![Term { k, j, time, amplitude }] }
    }

    /// One to three terms with modes `k, j <= 4`, random time factors and
    /// amplitudes in `[-1, 1]`.
    pub fn random<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let n = rng.random_range(1..=3);
        let terms = (0..n)
            .map(|_| Term {
                k: rng.random_range(0..=4),
                j: if dim == 2 { rng.random_range(0..=4) } else { 0 },
                time: TimeFactor::ALL[rng.random_range(0..TimeFactor::ALL.len())],
                amplitude: rng.random_range(-1.0..=1.0),
            })
            .collect();
        TestFunction { dim, terms }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let terms = self.terms.iter().map(|t| Term { amplitude: c * t.amplitude, ..t.clone() }).collect();
        TestFunction { dim: self.dim, terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }
}

/// Seeded suite of random test functions.
pub fn random_suite(size: usize, dim: usize, seed: u64) -> Vec<TestFunction> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| TestFunction::random(&mut rng, dim)).collect()
}

/// Diagonal elliptic operator, either `sum (a_i u_{x_i})_{x_i}` or
/// `sum a_i u_{x_i x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalOperator {
    pub a1: Coefficient,
    pub a2: Coefficient,
    pub divergence: bool,
}

impl DiagonalOperator {
    pub fn constant(a1: f64, a2: f64) -> Self {
        DiagonalOperator { a1: a1.into(), a2: a2.into(), divergence: true }
    }

    /// `sigma1^2 / 2 d_xx + sigma2^2 / 2 d_yy`.
    pub fn from_volatilities(sigma1_sq: &Coefficient, sigma2_sq: &Coefficient) -> Self {
        let half = |c: &Coefficient| match c {
            Coefficient::Const(v) => Coefficient::Const(0.5 * v),
            Coefficient::Expr(e) => {
                Coefficient::Expr(crate::expr::Expression::parse(&format!("0.5*({})", e.source())).expect("valid expression"))
            }
        };
        DiagonalOperator { a1: half(sigma1_sq), a2: half(sigma2_sq), divergence: false }
    }

    /// Ellipticity bounds `(mu1, mu2)` sampled on a 65 x 65 lattice.
    pub fn bounds(&self, dim: usize) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..65 {
            for j in 0..65 {
                let (x, y) = (i as f64 / 64.0, j as f64 / 64.0);
                let mut vals = vec![self.a1.eval(x, y, 0.0)];
                if dim == 2 {
                    vals.push(self.a2.eval(x, y, 0.0));
                }
                for v in vals {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theorem {
    #[serde(rename = "5.1")]
    T51,
    #[serde(rename = "5.2")]
    T52,
    #[serde(rename = "7.1")]
    T71,
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Theorem::T51 => "5.1",
            Theorem::T52 => "5.2",
            Theorem::T71 => "7.1",
        })
    }
}

impl FromStr for Theorem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "5.1" => Ok(Theorem::T51),
            "5.2" => Ok(Theorem::T52),
            "7.1" => Ok(Theorem::T71),
            other => Err(Error::invalid("theorem", "one of 5.1, 5.2, 7.1", other)),
        }
    }
}

/// Resolution of the spatial trapezoid and the time Simpson rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub t_final: f64,
    pub n_space: usize,
    pub n_time: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { t_final: 2.0, n_space: 65, n_time: 2000 }
    }
}

impl Quadrature {
    fn refined(&self) -> Self {
        Quadrature { t_final: self.t_final, n_space: 2 * self.n_space - 1, n_time: 2 * self.n_time }
    }
}

/// A named nonnegative term of an inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub name: String,
    pub value: f64,
}

fn item(name: &str, value: f64) -> Item {
    Item { name: name.to_owned(), value }
}

/// Margin under one reading of the terminal gradient weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalVariant {
    /// Exponent of the terminal gradient weight, as text.
    pub weight: String,
    pub allowance: f64,
    pub margin: f64,
}

/// Both sides of one inequality for one test function and one `(lambda, s)`.
/// All values carry the factor `exp(-2 lambda (T + 2)^s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarlemanReport {
    pub theorem: Theorem,
    pub lambda: f64,
    pub s: f64,
    /// Natural log of the common factor applied to every value.
    pub log_scale: f64,
    pub lhs: f64,
    pub positive_rhs_terms: Vec<Item>,
    pub parameter_free_rhs: f64,
    /// Terminal and initial terms common to every variant.
    pub boundary_allowance: Vec<Item>,
    /// One entry per reading of the terminal gradient weight (empty when the
    /// inequality has no such term).
    pub variants: Vec<TerminalVariant>,
    /// `lhs + allowances - parameter_free_rhs`, minimized over variants.
    pub margin: f64,
    pub empirical_c: Option<f64>,
    /// Largest relative change of any integral under halved spacings.
    pub refinement_change: f64,
    pub valid: bool,
}

impl CarlemanReport {
    /// Size of the left-hand side including allowances, for relative tolerances.
    pub fn scale(&self) -> f64 {
        let base = self.lhs + self.boundary_allowance.iter().map(|i| i.value).sum::<f64>();
        self.variants.iter().map(|v| base + v.allowance).fold(base, f64::max)
    }

    pub fn holds(&self, rel_tol: f64) -> bool {
        self.margin >= -rel_tol * self.scale()
    }
}

/// Simpson rule for `int_0^T f(t) exp(2 lambda ((t+2)^s - (T+2)^s)) dt` in
/// the variable `w = 2 lambda ((T+2)^s - (t+2)^s)`, truncated where
/// `exp(-w)` drops below `exp(-80)`.
struct TimeRule {
    t: Vec<f64>,
    w: Vec<f64>,
}

impl TimeRule {
    fn new(t_final: f64, cp: &CarlemanParams, n: usize) -> Self {
        let (lam, s) = (cp.lambda, cp.s);
        let top = (t_final + 2.0).powf(s);
        let w_max = (2.0 * lam * (top - 2.0_f64.powf(s))).min(80.0);
        let n = n + n % 2;
        let h = w_max / n as f64;
        let (t, w) = (0..=n)
            .map(|k| {
                let wk = k as f64 * h;
                let tk = ((top - wk / (2.0 * lam)).powf(1.0 / s) - 2.0).max(0.0);
                let simpson = if k == 0 || k == n {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let jac = 1.0 / (2.0 * lam * s * (tk + 2.0).powf(s - 1.0));
                (tk, simpson * h / 3.0 * (-wk).exp() * jac)
            })
            .unzip();
        TimeRule { t, w }
    }

    fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.t.iter().zip(&self.w).map(|(t, w)| w * f(*t)).sum()
    }
}

/// Spatial parts of one term sampled on the quadrature grid.
struct SpatialTerm {
    u: Vec<f64>,
    ux: Vec<f64>,
    uy: Vec<f64>,
    uxx: Vec<f64>,
    uyy: Vec<f64>,
    uxy: Vec<f64>,
    lu: Vec<f64>,
}

fn spatial_term(grid: &Grid, term: &Term, op: &DiagonalOperator) -> SpatialTerm {
    let kx = (term.k as f64 + 0.5) * PI;
    let ky = if grid.dim() == 2 { term.j as f64 * PI } else { 0.0 };
    let n = grid.len();
    let mut st = SpatialTerm {
        u: vec![0.0; n],
        ux: vec![0.0; n],
        uy: vec![0.0; n],
        uxx: vec![0.0; n],
        uyy: vec![0.0; n],
        uxy: vec![0.0; n],
        lu: vec![0.0; n],
    };
    const H: f64 = 1e-6;
    for k in 0..n {
        let (x, y) = grid.coords(k);
        let (cx, sx) = ((kx * x).cos(), (kx * x).sin());
        let (cy, sy) = ((ky * y).cos(), (ky * y).sin());
        st.u[k] = cx * cy;
        st.ux[k] = -kx * sx * cy;
        st.uy[k] = -ky * cx * sy;
        st.uxx[k] = -kx * kx * cx * cy;
        st.uyy[k] = -ky * ky * cx * cy;
        st.uxy[k] = kx * ky * sx * sy;
        let (a1, a2) = (op.a1.eval(x, y, 0.0), op.a2.eval(x, y, 0.0));
        let mut lu = a1 * st.uxx[k] + if grid.dim() == 2 { a2 * st.uyy[k] } else { 0.0 };
        if op.divergence {
            let dx = (op.a1.eval(x + H, y, 0.0) - op.a1.eval(x - H, y, 0.0)) / (2.0 * H);
            lu += dx * st.ux[k];
            if grid.dim() == 2 {
                let dy = (op.a2.eval(x, y + H, 0.0) - op.a2.eval(x, y - H, 0.0)) / (2.0 * H);
                lu += dy * st.uy[k];
            }
        }
        st.lu[k] = lu;
    }
    st
}

/// Every integral the three inequalities need, each scaled by
/// `exp(-2 lambda (T + 2)^s)` when it carries the weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Integrals {
    ut2: f64,
    lu2: f64,
    ut_lu: f64,
    grad2: f64,
    grad2_ts1: f64,
    u2_t2s2: f64,
    u2_ts1: f64,
    hess2: f64,
    u2_end: f64,
    grad2_end: f64,
    u2_start: f64,
    grad2_start: f64,
}

impl Integrals {
    fn as_array(&self) -> [f64; 12] {
        [
            self.ut2,
            self.lu2,
            self.ut_lu,
            self.grad2,
            self.grad2_ts1,
            self.u2_t2s2,
            self.u2_ts1,
            self.hess2,
            self.u2_end,
            self.grad2_end,
            self.u2_start,
            self.grad2_start,
        ]
    }

    fn compute(u: &TestFunction, op: &DiagonalOperator, cp: &CarlemanParams, q: &Quadrature) -> Result<Self> {
        let grid = match u.dim {
            1 => Grid::unit_interval(q.n_space)?,
            2 => Grid::unit_square(q.n_space, q.n_space)?,
            d => return Err(Error::Grid(format!("test functions live in 1 or 2 dimensions, not {d}"))),
        };
        let weights = grid.weights();
        let terms: Vec<SpatialTerm> = u.terms.iter().map(|t| spatial_term(&grid, t, op)).collect();
        let rule = TimeRule::new(q.t_final, cp, q.n_time);
        let s = cp.s;
        let t_end = q.t_final;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&weights).map(|((x, y), w)| x * y * w).sum::<f64>();

        let mut out = Integrals::default();
        for (p, tp) in u.terms.iter().zip(&terms) {
            for (r, tr) in u.terms.iter().zip(&terms) {
                let amp = p.amplitude * r.amplitude;
                if amp == 0.0 {
                    continue;
                }
                let uu = dot(&tp.u, &tr.u);
                let gg = dot(&tp.ux, &tr.ux) + dot(&tp.uy, &tr.uy);
                let hh = dot(&tp.uxx, &tr.uxx) + 2.0 * dot(&tp.uxy, &tr.uxy) + dot(&tp.uyy, &tr.uyy);
                let ll = dot(&tp.lu, &tr.lu);
                let ul = dot(&tp.u, &tr.lu);
                let (fp, fr) = (p.time, r.time);
                let tt = |deriv_p: bool, deriv_r: bool, power: f64| {
                    rule.integrate(|t| {
                        let (a, da) = fp.eval(t);
                        let (b, db) = fr.eval(t);
                        let w = if power == 0.0 { 1.0 } else { (t + 2.0).powf(power) };
                        (if deriv_p { da } else { a }) * (if deriv_r { db } else { b }) * w
                    })
                };
                let plain = tt(false, false, 0.0);
                out.ut2 += amp * uu * tt(true, true, 0.0);
                out.lu2 += amp * ll * plain;
                out.ut_lu += amp * ul * tt(true, false, 0.0);
                out.grad2 += amp * gg * plain;
                out.grad2_ts1 += amp * gg * tt(false, false, s - 1.0);
                out.u2_t2s2 += amp * uu * tt(false, false, 2.0 * s - 2.0);
                out.u2_ts1 += amp * uu * tt(false, false, s - 1.0);
                out.hess2 += amp * hh * plain;
                let (end_p, end_r) = (fp.eval(t_end).0, fr.eval(t_end).0);
                let (start_p, start_r) = (fp.eval(0.0).0, fr.eval(0.0).0);
                out.u2_end += amp * uu * end_p * end_r;
                out.grad2_end += amp * gg * end_p * end_r;
                out.u2_start += amp * uu * start_p * start_r;
                out.grad2_start += amp * gg * start_p * start_r;
            }
        }
        if out.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "Carleman integrals", index: 0 });
        }
        Ok(out)
    }
}

fn relative_change(a: &Integrals, b: &Integrals) -> f64 {
    let (a, b) = (a.as_array(), b.as_array());
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(&b)
        .map(|(x, y)| {
            // entries far below the largest one are judged against it
            let denom = x.abs().max(y.abs()).max(1e-6 * scale);
            if denom == 0.0 {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

const TRUST: f64 = 1e-3;

fn build(theorem: Theorem, u: &TestFunction, op: &DiagonalOperator, cp: &CarlemanParams, q: &Quadrature) -> Result<CarlemanReport> {
    let base = Integrals::compute(u, op, cp, q)?;
    let fine = Integrals::compute(u, op, cp, &q.refined())?;
    let change = relative_change(&base, &fine);
    let i = base;
    let (lam, s) = (cp.lambda, cp.s);
    let top = (q.t_final + 2.0).powf(s);
    let log_scale = -2.0 * lam * top;
    let (mu1, mu2) = op.bounds(u.dim);
    let terminal_u2 = lam * s * (q.t_final + 2.0).powf(s - 1.0) * i.u2_end;

    let (lhs, rhs_terms, allowance, variants, c_denominator) = match theorem {
        Theorem::T51 | Theorem::T71 => {
            let lhs = i.ut2 + 2.0 * i.ut_lu + i.lu2;
            let mut rhs = vec![item("u_t^2 / 4", 0.25 * i.ut2)];
            if theorem == Theorem::T51 {
                rhs.push(item("(Lu)^2", i.lu2));
            }
            rhs.push(item("lambda^2 s^2 (t+2)^(2s-2) u^2 / 2", 0.5 * lam * lam * s * s * i.u2_t2s2));
            let grad_weight = if theorem == Theorem::T51 { mu1 } else { mu1 * mu1 };
            let variants = vec![
                ("2 lambda (T+2)^s", 0.0),
                ("2 lambda (T+2)^2", 2.0 * lam * (q.t_final + 2.0).powi(2) + log_scale),
            ]
            .into_iter()
            .map(|(w, log_factor)| TerminalVariant { weight: w.into(), allowance: grad_weight * f64::exp(log_factor) * i.grad2_end, margin: 0.0 })
            .collect();
            let denom = match theorem {
                Theorem::T51 => lam * s * i.grad2_ts1,
                _ => i.hess2 + lam * s * i.grad2_ts1,
            };
            (lhs, rhs, vec![item("terminal u^2", terminal_u2)], variants, denom)
        }
        Theorem::T52 => {
            let lhs = i.ut2 - 2.0 * i.ut_lu + i.lu2;
            let rhs = vec![item("mu1 sqrt(s) |grad u|^2", mu1 * s.sqrt() * i.grad2)];
            let initial = f64::exp(2.0 * lam * 2.0_f64.powf(s) + log_scale) * (mu2 * i.grad2_start + 0.5 * s.sqrt() * i.u2_start);
            let allowance = vec![item("terminal u^2", terminal_u2), item("initial", initial)];
            (lhs, rhs, allowance, Vec::new(), lam * s * s * i.u2_ts1)
        }
    };
    let rhs: f64 = rhs_terms.iter().map(|t| t.value).sum();
    let common: f64 = lhs + allowance.iter().map(|t| t.value).sum::<f64>() - rhs;
    let variants: Vec<TerminalVariant> =
        variants.into_iter().map(|v: TerminalVariant| TerminalVariant { margin: common + v.allowance, ..v }).collect();
    let margin = variants.iter().map(|v| v.margin).fold(if variants.is_empty() { common } else { f64::INFINITY }, f64::min);
    let empirical_c = (c_denominator > 0.0).then(|| margin / c_denominator);
    Ok(CarlemanReport {
        theorem,
        lambda: lam,
        s,
        log_scale,
        lhs,
        positive_rhs_terms: rhs_terms,
        parameter_free_rhs: rhs,
        boundary_allowance: allowance,
        variants,
        margin,
        empirical_c,
        refinement_change: change,
        valid: change < TRUST,
    })
}

/// `int (u_t + Lu)^2 phi^2` against its parameter-free lower bound.
pub fn check_thm51(u: &TestFunction, op: &DiagonalOperator, cp: &CarlemanParams, q: &Quadrature) -> Result<CarlemanReport> {
    build(Theorem::T51, u, op, cp, q)
}

/// `int (u_t - Lu)^2 phi^2` against the `mu1 sqrt(s)` gradient term.
pub fn check_thm52(u: &TestFunction, op: &DiagonalOperator, cp: &CarlemanParams, q: &Quadrature) -> Result<CarlemanReport> {
    build(Theorem::T52, u, op, cp, q)
}

/// The first inequality specialised to `sigma1^2/2 d_xx + sigma2^2/2 d_yy`.
pub fn check_thm71(u: &TestFunction, sigma1_sq: &Coefficient, sigma2_sq: &Coefficient, cp: &CarlemanParams, q: &Quadrature) -> Result<CarlemanReport> {
    build(Theorem::T71, u, &DiagonalOperator::from_volatilities(sigma1_sq, sigma2_sq), cp, q)
}

pub fn check(theorem: Theorem, u: &TestFunction, op: &DiagonalOperator, cp: &CarlemanParams, q: &Quadrature) -> Result<CarlemanReport> {
    build(theorem, u, op, cp, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub s: f64,
    /// Smallest margin over the suite.
    pub min_margin: f64,
    /// Smallest `margin / scale` over the suite.
    pub min_relative_margin: f64,
    pub all_hold: bool,
    pub all_valid: bool,
    /// Smallest positive empirical constant over the suite.
    pub min_empirical_c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub theorem: Theorem,
    pub rows: Vec<ScanRow>,
    /// Least tested `s` from which on every margin holds for every `lambda`.
    pub threshold: Option<f64>,
    pub reports: Vec<CarlemanReport>,
}

/// Relative tolerance for calling a margin nonnegative.
pub const MARGIN_TOL: f64 = 1e-9;

/// Evaluates every `(lambda, s)` cell over the suite.
pub fn scan_thresholds(
    suite: &[TestFunction],
    theorem: Theorem,
    op: &DiagonalOperator,
    lambdas: &[f64],
    ss: &[f64],
    q: &Quadrature,
) -> Result<ThresholdTable> {
    if suite.is_empty() {
        return Err(Error::Admissibility("the test suite is empty".into()));
    }
    let mut cells = Vec::new();
    for &s in ss {
        for &lambda in lambdas {
            cells.push(CarlemanParams::new(lambda, s)?);
        }
    }
    let per_cell: Vec<Vec<CarlemanReport>> = cells
        .par_iter()
        .map(|cp| suite.iter().map(|u| build(theorem, u, op, cp, q)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ScanRow> = cells
        .iter()
        .zip(&per_cell)
        .map(|(cp, reports)| {
            let rel = |r: &CarlemanReport| if r.scale() > 0.0 { r.margin / r.scale() } else { 0.0 };
            ScanRow {
                lambda: cp.lambda,
                s: cp.s,
                min_margin: reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
                min_relative_margin: reports.iter().map(rel).fold(f64::INFINITY, f64::min),
                all_hold: reports.iter().all(|r| r.holds(MARGIN_TOL)),
                all_valid: reports.iter().all(|r| r.valid),
                min_empirical_c: reports.iter().filter_map(|r| r.empirical_c).reduce(f64::min),
            }
        })
        .collect();
    let mut sorted: Vec<f64> = ss.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let holds_at = |s: f64| rows.iter().filter(|r| r.s == s).all(|r| r.all_hold);
    let mut threshold = None;
    for &s in sorted.iter().rev() {
        if holds_at(s) {
            threshold = Some(s);
        } else {
            break;
        }
    }
    Ok(ThresholdTable { theorem, rows, threshold, reports: per_cell.into_iter().flatten().collect() })
}

/// Both sides of `int_Q 2 (L v) v_t = -[int sum a_i v_{x_i}^2]_0^T` for a
/// divergence-form operator, with a plain Simpson rule in time.
pub fn ibp_identity(v: &TestFunction, op: &DiagonalOperator, q: &Quadrature) -> Result<(f64, f64)> {
    if !op.divergence {
        return Err(Error::Admissibility("the identity is stated for divergence-form operators".into()));
    }
    let grid = if v.dim == 1 { Grid::unit_interval(q.n_space)? } else { Grid::unit_square(q.n_space, q.n_space)? };
    let weights = grid.weights();
    let terms: Vec<SpatialTerm> = v.terms.iter().map(|t| spatial_term(&grid, t, op)).collect();
    let a: Vec<(f64, f64)> = (0..grid.len())
        .map(|k| {
            let (x, y) = grid.coords(k);
            (op.a1.eval(x, y, 0.0), op.a2.eval(x, y, 0.0))
        })
        .collect();
    let n = q.n_time + q.n_time % 2;
    let h = q.t_final / n as f64;
    let mut lhs = 0.0;
    let mut energy = [0.0; 2];
    for (p, sp) in v.terms.iter().zip(&terms) {
        for (r, sr) in v.terms.iter().zip(&terms) {
            let amp = p.amplitude * r.amplitude;
            let lu_u: f64 = (0..grid.len()).map(|k| weights[k] * sp.lu[k] * sr.u[k]).sum();
            let agrad: f64 = (0..grid.len()).map(|k| weights[k] * (a[k].0 * sp.ux[k] * sr.ux[k] + a[k].1 * sp.uy[k] * sr.uy[k])).sum();
            let time: f64 = (0..=n)
                .map(|k| {
                    let t = k as f64 * h;
                    let c = if k == 0 || k == n {
                        1.0
                    } else if k % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    c * h / 3.0 * p.time.eval(t).0 * r.time.eval(t).1
                })
                .sum();
            lhs += 2.0 * amp * lu_u * time;
            energy[0] += amp * agrad * p.time.eval(0.0).0 * r.time.eval(0.0).0;
            energy[1] += amp * agrad * p.time.eval(q.t_final).0 * r.time.eval(q.t_final).0;
        }
    }
    Ok((lhs, energy[0] - energy[1]))
}
