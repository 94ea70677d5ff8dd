//! Truncated space-time grids and sampled fields.
//!
//! A [`Grid`] is the tensor product of a uniform time grid on `[0, T]` with a
//! uniform spatial grid on the box `[-L, L]^d`. A [`SpaceTimeField`] stores
//! vector values at every (time, node) pair and is evaluated by multilinear
//! interpolation in space and piecewise-constant-left interpolation in time,
//! matching the left-point rule of the Euler-Maruyama engine.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    points_per_axis: usize,
    time_horizon: f64,
    time_steps: usize,
}

impl Grid {
    pub fn new(
        dim: usize,
        half_width: f64,
        points_per_axis: usize,
        time_horizon: f64,
        time_steps: usize,
    ) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::Parameter(format!("dimension {dim} not in 1..=3")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::Parameter(format!(
                "half width {half_width} must be positive"
            )));
        }
        if points_per_axis < 8 {
            return Err(Error::Parameter(format!(
                "points per axis {points_per_axis} must be at least 8"
            )));
        }
        if !(time_horizon.is_finite() && time_horizon > 0.0) {
            return Err(Error::Parameter(format!(
                "time horizon {time_horizon} must be positive"
            )));
        }
        if time_steps < 2 {
            return Err(Error::Parameter(format!(
                "time steps {time_steps} must be at least 2"
            )));
        }
        Ok(Self {
            dim,
            half_width,
            points_per_axis,
            time_horizon,
            time_steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn time_horizon(&self) -> f64 {
        self.time_horizon
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    /// Same spatial box, different number of time slices.
    pub fn with_time_steps(&self, time_steps: usize) -> Result<Self> {
        Self::new(
            self.dim,
            self.half_width,
            self.points_per_axis,
            self.time_horizon,
            time_steps,
        )
    }

    /// Same box and times, different spatial resolution.
    pub fn with_points_per_axis(&self, points_per_axis: usize) -> Result<Self> {
        Self::new(
            self.dim,
            self.half_width,
            points_per_axis,
            self.time_horizon,
            self.time_steps,
        )
    }

    /// Spatial spacing `h = 2L / (M - 1)`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    /// Temporal spacing `T / (K - 1)`.
    pub fn time_step(&self) -> f64 {
        self.time_horizon / (self.time_steps - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.time_step()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.time_steps).map(|k| self.time(k)).collect()
    }

    /// Coordinate of grid index `i` along any axis.
    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Multi-index of a node; axis 0 varies fastest.
    pub fn multi_index(&self, node: usize) -> [usize; MAX_DIM] {
        let m = self.points_per_axis;
        let mut idx = [0; MAX_DIM];
        let mut rest = node;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % m;
            rest /= m;
        }
        idx
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        let m = self.points_per_axis;
        idx[..self.dim].iter().rev().fold(0, |acc, &i| acc * m + i)
    }

    /// Physical coordinates of a node (entries beyond `dim` are zero).
    pub fn node_coords(&self, node: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(node);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = self.coordinate(idx[a]);
        }
        x
    }

    /// True when the node lies on the boundary of the box.
    pub fn is_boundary(&self, node: usize) -> bool {
        let idx = self.multi_index(node);
        idx[..self.dim]
            .iter()
            .any(|&i| i == 0 || i == self.points_per_axis - 1)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let tol = SNAP * self.spacing();
        x.len() == self.dim
            && x.iter()
                .all(|v| v.is_finite() && v.abs() <= self.half_width + tol)
    }

    /// Slice index of `t` under piecewise-constant-left interpolation.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let tol = SNAP * self.time_step();
        if !t.is_finite() || t < -tol || t > self.time_horizon + tol {
            return None;
        }
        let s = t / self.time_step();
        let r = s.round();
        let k = if (s - r).abs() < SNAP { r } else { s.floor() };
        Some((k.max(0.0) as usize).min(self.time_steps - 1))
    }

    /// Lower cell index and fractional offset of coordinate `x` on one axis.
    fn locate_axis(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let s = (x + self.half_width) / h;
        let r = s.round();
        let s = if (s - r).abs() < SNAP { r } else { s };
        let max = (self.points_per_axis - 1) as f64;
        let s = s.clamp(0.0, max);
        let i0 = (s.floor() as usize).min(self.points_per_axis - 2);
        (i0, s - i0 as f64)
    }
}

/// Vector-valued samples on every (time, node) pair of a grid.
///
/// Values are stored as `values[(k * nodes + node) * codim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Grid,
    codim: usize,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn new(grid: Grid, codim: usize, values: Vec<f64>) -> Result<Self> {
        if codim == 0 {
            return Err(Error::Parameter(
                "field codimension must be positive".into(),
            ));
        }
        let expected = grid.time_steps() * grid.node_count() * codim;
        if values.len() != expected {
            return Err(Error::Data(format!(
                "field has {} values, grid requires {expected}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite field value at offset {pos}"
            )));
        }
        Ok(Self {
            grid,
            codim,
            values,
        })
    }

    pub fn zeros(grid: Grid, codim: usize) -> Self {
        let len = grid.time_steps() * grid.node_count() * codim;
        Self {
            grid,
            codim,
            values: vec![0.0; len],
        }
    }

    pub fn constant(grid: Grid, value: &[f64]) -> Self {
        let n = grid.time_steps() * grid.node_count();
        let mut values = Vec::with_capacity(n * value.len());
        for _ in 0..n {
            values.extend_from_slice(value);
        }
        Self {
            grid,
            codim: value.len(),
            values,
        }
    }

    /// Samples `f(t, x, out)` at every grid node. Non-finite samples are an error.
    pub fn from_fn<F>(grid: Grid, codim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, &[f64], &mut [f64]) + Sync,
    {
        let nodes = grid.node_count();
        let d = grid.dim();
        let mut values = vec![0.0; grid.time_steps() * nodes * codim];
        values
            .par_chunks_mut(nodes * codim)
            .enumerate()
            .for_each(|(k, slice)| {
                let t = grid.time(k);
                for (node, out) in slice.chunks_mut(codim).enumerate() {
                    let x = grid.node_coords(node);
                    f(t, &x[..d], out);
                }
            });
        Self::new(grid, codim, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slice_len(&self) -> usize {
        self.grid.node_count() * self.codim
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub(crate) fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn node_value(&self, k: usize, node: usize) -> &[f64] {
        let start = (k * self.grid.node_count() + node) * self.codim;
        &self.values[start..start + self.codim]
    }

    /// Euclidean magnitude of the value at a node.
    pub fn node_magnitude(&self, k: usize, node: usize) -> f64 {
        norm2(self.node_value(k, node))
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.codim];
        self.evaluate_into(t, x, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let k = self.grid.time_index(t).ok_or_else(|| Error::OutOfDomain {
            time: t,
            point: x.to_vec(),
        })?;
        self.evaluate_slice_into(k, x, out).map_err(|e| match e {
            Error::OutOfDomain { point, .. } => Error::OutOfDomain { time: t, point },
            other => other,
        })
    }

    /// Multilinear interpolation inside time slice `k`.
    pub fn evaluate_slice_into(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.grid.contains(x) {
            return Err(Error::OutOfDomain {
                time: self.grid.time(k),
                point: x.to_vec(),
            });
        }
        if out.len() != self.codim {
            return Err(Error::Parameter(format!(
                "output buffer has length {}, field codimension is {}",
                out.len(),
                self.codim
            )));
        }
        let d = self.grid.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..d {
            let (i0, s) = self.grid.locate_axis(x[a]);
            base[a] = i0;
            frac[a] = s;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let slice = self.slice(k);
        let mut idx = [0usize; MAX_DIM];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let up = (corner >> a) & 1 == 1;
                idx[a] = base[a] + up as usize;
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let node = self.grid.node_index(&idx);
            let vals = &slice[node * self.codim..(node + 1) * self.codim];
            for (o, v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
        }
        Ok(())
    }

    /// `alpha * self + beta * other` on identical grids.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Self::new(self.grid, self.codim, values)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            grid: self.grid,
            codim: self.codim,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub(crate) fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.codim != other.codim {
            return Err(Error::Parameter("fields live on different grids".into()));
        }
        Ok(())
    }

    /// Spatial Jacobian by centered differences (one-sided on the boundary).
    ///
    /// The result has codimension `codim * dim`, entry `c * dim + j` holding
    /// the derivative of component `c` along axis `j`.
    pub fn jacobian(&self) -> Self {
        let grid = self.grid;
        let d = grid.dim();
        let m = self.codim;
        let nodes = grid.node_count();
        let out_codim = m * d;
        let mut values = vec![0.0; grid.time_steps() * nodes * out_codim];
        values
            .par_chunks_mut(nodes * out_codim)
            .enumerate()
            .for_each(|(k, out)| {
                let slice = self.slice(k);
                for node in 0..nodes {
                    let jac = &mut out[node * out_codim..(node + 1) * out_codim];
                    jacobian_at(&grid, slice, m, node, jac);
                }
            });
        Self {
            grid,
            codim: out_codim,
            values,
        }
    }

    /// Samples this field on another grid (nodes of `target` must lie in the box).
    pub fn resample(&self, target: &Grid) -> Result<Self> {
        if *target == self.grid {
            return Ok(self.clone());
        }
        if target.dim() != self.grid.dim() {
            return Err(Error::Parameter("cannot resample across dimensions".into()));
        }
        let nodes = target.node_count();
        let d = target.dim();
        let m = self.codim;
        let mut values = vec![0.0; target.time_steps() * nodes * m];
        values
            .par_chunks_mut(nodes * m)
            .enumerate()
            .try_for_each(|(k, out)| -> Result<()> {
                let t = target.time(k);
                for node in 0..nodes {
                    let x = target.node_coords(node);
                    self.evaluate_into(t, &x[..d], &mut out[node * m..(node + 1) * m])?;
                }
                Ok(())
            })?;
        Self::new(*target, m, values)
    }
}

pub(crate) fn jacobian_at(grid: &Grid, slice: &[f64], codim: usize, node: usize, jac: &mut [f64]) {
    let d = grid.dim();
    let h = grid.spacing();
    let mp = grid.points_per_axis();
    let idx = grid.multi_index(node);
    for j in 0..d {
        let mut lo = idx;
        let mut hi = idx;
        let width = if idx[j] == 0 {
            hi[j] += 1;
            h
        } else if idx[j] == mp - 1 {
            lo[j] -= 1;
            h
        } else {
            lo[j] -= 1;
            hi[j] += 1;
            2.0 * h
        };
        let nl = grid.node_index(&lo);
        let nh = grid.node_index(&hi);
        for c in 0..codim {
            jac[c * d + j] = (slice[nh * codim + c] - slice[nl * codim + c]) / width;
        }
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
