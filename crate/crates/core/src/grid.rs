//! Uniform tensor grids on the unit interval / unit square and on `[0, T]`,
//! with the trapezoid quadrature and finite-difference operators shared by
//! every other module.
//!
//! Nodes are stored row-major: `idx = j * nx + i`, with `i` along `x` and `j`
//! along `y`. Space-time values are stored level by level, so the layout of a
//! [`SpaceTimeField`] is `(t, y, x)` from slowest to fastest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

/// Uniform grid on `[0,1]` (dim 1) or `[0,1]^2` (dim 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    nx: usize,
    ny: usize,
}

impl Grid {
    pub fn unit_square(nx: usize, ny: usize) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Grid(format!("need at least 3 nodes per axis, got {nx}x{ny}")));
        }
        Ok(Grid { dim: 2, nx, ny })
    }

    pub fn unit_interval(nx: usize) -> Result<Self> {
        if nx < 3 {
            return Err(Error::Grid(format!("need at least 3 nodes, got {nx}")));
        }
        Ok(Grid { dim: 1, nx, ny: 1 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Node count along `y`; 1 for a one-dimensional grid.
    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    /// Spacing along `y`; zero for a one-dimensional grid.
    pub fn hy(&self) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            1.0 / (self.ny - 1) as f64
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            1.0
        } else {
            i as f64 * self.hx()
        }
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        if self.dim == 1 {
            0.0
        } else if j + 1 == self.ny {
            1.0
        } else {
            j as f64 * self.hy()
        }
    }

    /// Coordinates of node `idx`.
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        (self.x(idx % self.nx), self.y(idx / self.nx))
    }

    /// Grid with every spacing halved (`n -> 2n - 1` nodes per axis).
    pub fn refined(&self) -> Self {
        match self.dim {
            1 => Grid { dim: 1, nx: 2 * self.nx - 1, ny: 1 },
            _ => Grid { dim: 2, nx: 2 * self.nx - 1, ny: 2 * self.ny - 1 },
        }
    }

    /// Trapezoid weights along `x`.
    pub fn weights_x(&self) -> Vec<f64> {
        trapezoid_weights(self.nx, self.hx())
    }

    /// Trapezoid weights along `y` (a single unit weight in 1-D).
    pub fn weights_y(&self) -> Vec<f64> {
        if self.dim == 1 {
            vec![1.0]
        } else {
            trapezoid_weights(self.ny, self.hy())
        }
    }

    /// Tensor-product trapezoid weight of every node.
    pub fn weights(&self) -> Vec<f64> {
        let wx = self.weights_x();
        let wy = self.weights_y();
        let mut w = Vec::with_capacity(self.len());
        for wyj in &wy {
            w.extend(wx.iter().map(|wxi| wxi * wyj));
        }
        w
    }

    /// Whether the node lies on the absorbing face `x = 1`.
    pub fn on_gamma0(&self, idx: usize) -> bool {
        idx % self.nx == self.nx - 1
    }

    /// Whether the node lies on the reflecting part of the boundary.
    pub fn on_gamma1(&self, idx: usize) -> bool {
        let (i, j) = (idx % self.nx, idx / self.nx);
        if self.on_gamma0(idx) {
            return false;
        }
        i == 0 || (self.dim == 2 && (j == 0 || j == self.ny - 1))
    }
}

pub(crate) fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Partition of the boundary into the absorbing face `{x = 1}` and the
/// reflecting remainder.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryPartition<'a> {
    grid: &'a Grid,
}

impl<'a> BoundaryPartition<'a> {
    pub fn new(grid: &'a Grid) -> Self {
        BoundaryPartition { grid }
    }

    pub fn gamma0(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.grid.on_gamma0(k)).collect()
    }

    pub fn gamma1(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.grid.on_gamma1(k)).collect()
    }
}

/// Uniform time grid on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_final: f64,
    nt: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::invalid("T", "> 0", t_final));
        }
        if nt < 2 {
            return Err(Error::invalid("nt", ">= 2", nt));
        }
        Ok(TimeGrid { t_final, nt })
    }

    /// Time grid for retrospective experiments, which need `T > 1`.
    pub fn retrospective(t_final: f64, nt: usize) -> Result<Self> {
        if t_final <= 1.0 {
            return Err(Error::invalid("T", "> 1 for retrospective problems", t_final));
        }
        Self::new(t_final, nt)
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.nt - 1) as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        if n + 1 == self.nt {
            self.t_final
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn refined(&self) -> Self {
        TimeGrid { t_final: self.t_final, nt: 2 * self.nt - 1 }
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nt, self.dt())
    }
}

/// Scalar values at every node of a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        check_finite("scalar field", &values)?;
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                f(x, y)
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        ScalarField { grid: self.grid, values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::Shape("fields live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect();
        Ok(ScalarField { grid: self.grid, values })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Bilinear interpolation at an arbitrary point of the (closed) domain.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        interpolate_level(&self.grid, &self.values, x, y)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["x", "y", "value"]).map_err(|e| csv_err(path, e))?;
        for (k, v) in self.values.iter().enumerate() {
            let (x, y) = self.grid.coords(k);
            w.write_record([fmt(x), fmt(y), fmt(*v)]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::Io { path: path.into(), source: e })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_rows(path, &["x", "y", "value"])?;
        let xs = unique_sorted(rows.iter().map(|r| r[0]));
        let ys = unique_sorted(rows.iter().map(|r| r[1]));
        let grid = grid_from_axes(path, &xs, &ys)?;
        let mut values = vec![f64::NAN; grid.len()];
        for r in &rows {
            let k = grid.idx(locate(&xs, r[0]), locate(&ys, r[1]));
            values[k] = r[2];
        }
        ScalarField::new(grid, values).map_err(|e| Error::Parse { path: path.into(), reason: e.to_string() })
    }
}

/// Values on every node at every level of a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    grid: Grid,
    time: TimeGrid,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn new(grid: Grid, time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * time.nt() {
            return Err(Error::Shape(format!(
                "space-time field has {} values, expected {}",
                values.len(),
                grid.len() * time.nt()
            )));
        }
        check_finite("space-time field", &values)?;
        Ok(SpaceTimeField { grid, time, values })
    }

    pub fn zeros(grid: Grid, time: TimeGrid) -> Self {
        SpaceTimeField { grid, time, values: vec![0.0; grid.len() * time.nt()] }
    }

    pub fn from_fn(grid: Grid, time: TimeGrid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len() * time.nt());
        for n in 0..time.nt() {
            let t = time.t(n);
            values.extend((0..grid.len()).map(|k| {
                let (x, y) = grid.coords(k);
                f(x, y, t)
            }));
        }
        SpaceTimeField { grid, time, values }
    }

    /// Copies of `level` at every time level.
    pub fn broadcast(level: &ScalarField, time: TimeGrid) -> Self {
        let mut values = Vec::with_capacity(level.values.len() * time.nt());
        for _ in 0..time.nt() {
            values.extend_from_slice(&level.values);
        }
        SpaceTimeField { grid: level.grid, time, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let len = self.grid.len();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.grid.len();
        &mut self.values[n * len..(n + 1) * len]
    }

    pub fn level_field(&self, n: usize) -> ScalarField {
        ScalarField { grid: self.grid, values: self.level(n).to_vec() }
    }

    pub fn set_level(&mut self, n: usize, values: &[f64]) {
        self.level_mut(n).copy_from_slice(values);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `sup |self - other|`.
    pub fn sup_distance(&self, other: &SpaceTimeField) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sub(&self, other: &SpaceTimeField) -> Result<Self> {
        if self.grid != other.grid || self.time != other.time {
            return Err(Error::Shape("space-time fields live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(SpaceTimeField { grid: self.grid, time: self.time, values })
    }

    /// Bilinear in space, linear in time.
    pub fn interpolate(&self, x: f64, y: f64, t: f64) -> f64 {
        let nt = self.time.nt();
        let s = (t / self.time.dt()).clamp(0.0, (nt - 1) as f64);
        let n0 = (s.floor() as usize).min(nt - 2);
        let w = s - n0 as f64;
        let a = interpolate_level(&self.grid, self.level(n0), x, y);
        let b = interpolate_level(&self.grid, self.level(n0 + 1), x, y);
        (1.0 - w) * a + w * b
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["t", "x", "y", "value"]).map_err(|e| csv_err(path, e))?;
        for n in 0..self.time.nt() {
            let t = self.time.t(n);
            for (k, v) in self.level(n).iter().enumerate() {
                let (x, y) = self.grid.coords(k);
                w.write_record([fmt(t), fmt(x), fmt(y), fmt(*v)]).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::Io { path: path.into(), source: e })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_rows(path, &["t", "x", "y", "value"])?;
        let ts = unique_sorted(rows.iter().map(|r| r[0]));
        let xs = unique_sorted(rows.iter().map(|r| r[1]));
        let ys = unique_sorted(rows.iter().map(|r| r[2]));
        let grid = grid_from_axes(path, &xs, &ys)?;
        let t_final = *ts.last().unwrap_or(&0.0);
        let time = TimeGrid::new(t_final, ts.len()).map_err(|e| Error::Parse { path: path.into(), reason: e.to_string() })?;
        let mut values = vec![f64::NAN; grid.len() * time.nt()];
        for r in &rows {
            let n = locate(&ts, r[0]);
            let k = grid.idx(locate(&xs, r[1]), locate(&ys, r[2]));
            values[n * grid.len() + k] = r[3];
        }
        SpaceTimeField::new(grid, time, values).map_err(|e| Error::Parse { path: path.into(), reason: e.to_string() })
    }
}

fn interpolate_level(grid: &Grid, values: &[f64], x: f64, y: f64) -> f64 {
    let (nx, ny) = (grid.nx(), grid.ny());
    let sx = (x.clamp(0.0, 1.0) / grid.hx()).min((nx - 1) as f64);
    let i0 = (sx.floor() as usize).min(nx - 2);
    let wx = sx - i0 as f64;
    if grid.dim() == 1 {
        return (1.0 - wx) * values[i0] + wx * values[i0 + 1];
    }
    let sy = (y.clamp(0.0, 1.0) / grid.hy()).min((ny - 1) as f64);
    let j0 = (sy.floor() as usize).min(ny - 2);
    let wy = sy - j0 as f64;
    let v = |i: usize, j: usize| values[j * nx + i];
    (1.0 - wy) * ((1.0 - wx) * v(i0, j0) + wx * v(i0 + 1, j0)) + wy * ((1.0 - wx) * v(i0, j0 + 1) + wx * v(i0 + 1, j0 + 1))
}

/// Trapezoid approximation of the integral over the unit square (or interval).
pub fn integrate_space(f: &ScalarField) -> Result<f64> {
    check_finite("integrand", &f.values)?;
    Ok(weighted_sum(&f.grid, &f.values))
}

pub(crate) fn weighted_sum(grid: &Grid, values: &[f64]) -> f64 {
    let wx = grid.weights_x();
    let wy = grid.weights_y();
    let nx = grid.nx();
    let mut total = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let row = &values[j * nx..(j + 1) * nx];
        let s: f64 = row.iter().zip(&wx).map(|(v, w)| v * w).sum();
        total += wyj * s;
    }
    total
}

/// Trapezoid approximation of the integral over `Omega x (0, T)`.
pub fn integrate_spacetime(f: &SpaceTimeField) -> Result<f64> {
    check_finite("integrand", &f.values)?;
    let wt = f.time.weights();
    Ok((0..f.time.nt()).map(|n| wt[n] * weighted_sum(&f.grid, f.level(n))).sum())
}

/// Derivative along one axis of a strided line: central differences inside,
/// second-order one-sided differences at both ends.
pub(crate) fn diff_line(values: &[f64], start: usize, stride: usize, n: usize, h: f64, out: &mut [f64]) {
    let at = |i: usize| values[start + i * stride];
    out[start] = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
    for i in 1..n - 1 {
        out[start + i * stride] = (at(i + 1) - at(i - 1)) / (2.0 * h);
    }
    out[start + (n - 1) * stride] = (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h);
}

/// Partial derivative of raw nodal values along `axis` (0 = x, 1 = y).
pub(crate) fn partial(grid: &Grid, values: &[f64], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let (nx, ny) = (grid.nx(), grid.ny());
    if axis == 0 {
        for j in 0..ny {
            diff_line(values, j * nx, 1, nx, grid.hx(), &mut out);
        }
    } else {
        for i in 0..nx {
            diff_line(values, i, nx, ny, grid.hy(), &mut out);
        }
    }
    out
}

/// Gradient of `f`: one component per spatial axis.
pub fn gradient(f: &ScalarField) -> Vec<ScalarField> {
    (0..f.grid.dim())
        .map(|axis| ScalarField { grid: f.grid, values: partial(&f.grid, &f.values, axis) })
        .collect()
}

/// `sqrt(int f^2 + int |grad f|^2)`.
pub fn h1_norm(f: &ScalarField) -> f64 {
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| a * a).collect() };
    let mut total = weighted_sum(&f.grid, &sq(&f.values));
    for g in gradient(f) {
        total += weighted_sum(&f.grid, &sq(&g.values));
    }
    total.sqrt()
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.into(), reason: e.to_string() }
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut reader = csv::Reader::from_reader(file);
    let found: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Parse {
            path: path.into(),
            reason: format!("expected header {}, found {}", header.join(","), found.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: path.into(), reason: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

fn unique_sorted(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = it.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    v
}

fn locate(axis: &[f64], v: f64) -> usize {
    axis.partition_point(|a| *a < v - 1e-12)
}

fn grid_from_axes(path: &Path, xs: &[f64], ys: &[f64]) -> Result<Grid> {
    let bad = |reason: String| Error::Parse { path: path.into(), reason };
    let grid = if ys.len() == 1 {
        Grid::unit_interval(xs.len())
    } else {
        Grid::unit_square(xs.len(), ys.len())
    }
    .map_err(|e| bad(e.to_string()))?;
    let uniform = xs.iter().enumerate().all(|(i, x)| (x - grid.x(i)).abs() < 1e-9)
        && (grid.dim() == 1 || ys.iter().enumerate().all(|(j, y)| (y - grid.y(j)).abs() < 1e-9));
    if !uniform {
        return Err(bad("nodes do not form a uniform grid on the unit square".into()));
    }
    Ok(grid)
}
