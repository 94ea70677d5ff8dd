//! Norms on sampled fields and paths.
//!
//! Spatial integrals are nodal quadratures (trapezoid weights by default),
//! time integrals are left-endpoint Riemann sums over the slices
//! `0..K-1`, matching piecewise-constant-left interpolation in time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{jacobian_at, norm2, Grid, SpaceTimeField, MAX_DIM};

/// Spatial quadrature rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Quadrature {
    /// Every node weighted by `h^d`.
    Riemann,
    /// Tensor-product trapezoid weights; exact for multilinear integrands.
    #[default]
    Trapezoid,
}

/// Inner radius of the cutoff profile (χ ≡ 1 inside).
pub const CUTOFF_INNER: f64 = 1.0;
/// Outer radius of the cutoff profile (χ ≡ 0 outside).
pub const CUTOFF_OUTER: f64 = 2.0;
/// Pitch of the shift lattice used for uniformly local norms.
pub const SHIFT_PITCH: f64 = 0.5 * CUTOFF_INNER;

fn smooth_edge(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// Smooth radial cutoff: 1 on `r ≤ 1`, 0 on `r ≥ 2`, C^∞ in between.
pub fn cutoff(r: f64) -> f64 {
    if r <= CUTOFF_INNER {
        1.0
    } else if r >= CUTOFF_OUTER {
        0.0
    } else {
        let a = smooth_edge(CUTOFF_OUTER - r);
        let b = smooth_edge(r - CUTOFF_INNER);
        a / (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedNormSpec {
    /// Time exponent in `[1, ∞]`.
    pub q: f64,
    /// Space exponent in `[1, ∞]`.
    pub p: f64,
    pub uniformly_local: bool,
}

impl MixedNormSpec {
    pub fn new(q: f64, p: f64, uniformly_local: bool) -> Result<Self> {
        check_exponent(q)?;
        check_exponent(p)?;
        Ok(Self {
            q,
            p,
            uniformly_local,
        })
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Parameter(format!(
            "exponent {p} must lie in [1, inf]"
        )));
    }
    Ok(())
}

/// Per-node quadrature weights (including the cell volume).
pub fn quadrature_weights(grid: &Grid, rule: Quadrature) -> Vec<f64> {
    let h = grid.spacing();
    let m = grid.points_per_axis();
    let d = grid.dim();
    (0..grid.node_count())
        .map(|node| {
            let idx = grid.multi_index(node);
            let mut w = 1.0;
            for &i in &idx[..d] {
                w *= match rule {
                    Quadrature::Trapezoid if i == 0 || i == m - 1 => 0.5 * h,
                    _ => h,
                };
            }
            w
        })
        .collect()
}

fn magnitudes(slice: &[f64], codim: usize) -> Result<Vec<f64>> {
    let mags: Vec<f64> = slice.chunks(codim).map(norm2).collect();
    if mags.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN value in field slice".into()));
    }
    Ok(mags)
}

/// `‖f‖_{L^p}` of one time slice with the default quadrature.
pub fn lp_space_norm(grid: &Grid, slice: &[f64], codim: usize, p: f64) -> Result<f64> {
    lp_space_norm_with(grid, slice, codim, p, Quadrature::default())
}

pub fn lp_space_norm_with(
    grid: &Grid,
    slice: &[f64],
    codim: usize,
    p: f64,
    rule: Quadrature,
) -> Result<f64> {
    check_exponent(p)?;
    let mags = magnitudes(slice, codim)?;
    if p.is_infinite() {
        return Ok(mags.iter().fold(0.0, |a: f64, &v| a.max(v)));
    }
    let w = quadrature_weights(grid, rule);
    let sum: f64 = mags.iter().zip(&w).map(|(v, w)| w * v.powf(p)).sum();
    Ok(sum.powf(1.0 / p))
}

/// Points of the shift lattice `SHIFT_PITCH · Z^d` inside the box.
pub fn shift_lattice(grid: &Grid) -> Vec<[f64; MAX_DIM]> {
    let d = grid.dim();
    let n = (grid.half_width() / SHIFT_PITCH).floor() as i64;
    let span = (2 * n + 1) as usize;
    (0..span.pow(d as u32))
        .map(|flat| {
            let mut z = [0.0; MAX_DIM];
            let mut rest = flat;
            for slot in z.iter_mut().take(d) {
                *slot = ((rest % span) as i64 - n) as f64 * SHIFT_PITCH;
                rest /= span;
            }
            z
        })
        .collect()
}

/// `max_z Σ_nodes w · χ(x - z)^{chi_power} · |f(x)|^{f_power}` over the shift lattice.
pub fn local_power_sum(
    grid: &Grid,
    slice: &[f64],
    codim: usize,
    f_power: f64,
    chi_power: f64,
    rule: Quadrature,
) -> Result<f64> {
    let mags = magnitudes(slice, codim)?;
    let w = quadrature_weights(grid, rule);
    let d = grid.dim();
    let h = grid.spacing();
    let l = grid.half_width();
    let m = grid.points_per_axis() as i64;
    let sums: Vec<f64> = shift_lattice(grid)
        .par_iter()
        .map(|z| {
            let mut lo = [0usize; MAX_DIM];
            let mut hi = [0usize; MAX_DIM];
            for a in 0..d {
                let a_lo = (((z[a] - CUTOFF_OUTER + l) / h).ceil() as i64).clamp(0, m - 1);
                let a_hi = (((z[a] + CUTOFF_OUTER + l) / h).floor() as i64).clamp(0, m - 1);
                lo[a] = a_lo as usize;
                hi[a] = a_hi as usize;
            }
            let mut acc = 0.0;
            let mut idx = lo;
            'outer: loop {
                let node = grid.node_index(&idx);
                let mut r2 = 0.0;
                for a in 0..d {
                    let dx = grid.coordinate(idx[a]) - z[a];
                    r2 += dx * dx;
                }
                let chi = cutoff(r2.sqrt());
                if chi > 0.0 && mags[node] > 0.0 {
                    acc += w[node] * chi.powf(chi_power) * mags[node].powf(f_power);
                }
                for a in 0..d {
                    if idx[a] < hi[a] {
                        idx[a] += 1;
                        continue 'outer;
                    }
                    idx[a] = lo[a];
                }
                break;
            }
            acc
        })
        .collect();
    Ok(sums.into_iter().fold(0.0, f64::max))
}

/// `‖f‖_{L̃^p} = max_z ‖χ(· - z) f‖_{L^p}` over the shift lattice.
pub fn uniformly_local_norm(grid: &Grid, slice: &[f64], codim: usize, p: f64) -> Result<f64> {
    check_exponent(p)?;
    if p.is_infinite() {
        return lp_space_norm(grid, slice, codim, p);
    }
    Ok(local_power_sum(grid, slice, codim, p, p, Quadrature::default())?.powf(1.0 / p))
}

/// L^q norm in time of per-slice values, left-endpoint rule over slices `0..len-1`.
pub fn time_norm(per_slice: &[f64], dt: f64, q: f64) -> f64 {
    let used = &per_slice[..per_slice.len().saturating_sub(1).max(1)];
    if q.is_infinite() {
        used.iter().fold(0.0, |a: f64, &v| a.max(v))
    } else {
        (used.iter().map(|v| dt * v.powf(q)).sum::<f64>()).powf(1.0 / q)
    }
}

/// Per-slice spatial norms (plain or uniformly local).
pub fn slice_norms(field: &SpaceTimeField, p: f64, uniformly_local: bool) -> Result<Vec<f64>> {
    let g = field.grid();
    (0..g.time_steps())
        .map(|k| {
            if uniformly_local {
                uniformly_local_norm(g, field.slice(k), field.codim(), p)
            } else {
                lp_space_norm(g, field.slice(k), field.codim(), p)
            }
        })
        .collect()
}

/// `‖f‖_{L^q_t L^p_x}` (or `L^q_t L̃^p_x`).
pub fn mixed_norm(field: &SpaceTimeField, spec: &MixedNormSpec) -> Result<f64> {
    let per_slice = slice_norms(field, spec.p, spec.uniformly_local)?;
    Ok(time_norm(&per_slice, field.grid().time_step(), spec.q))
}

/// `max_x |f(x)| / (1 + |x|)` over the nodes of one slice.
pub fn linear_growth_envelope(grid: &Grid, slice: &[f64], codim: usize) -> f64 {
    let d = grid.dim();
    slice
        .chunks(codim)
        .enumerate()
        .map(|(node, v)| {
            let x = grid.node_coords(node);
            norm2(v) / (1.0 + norm2(&x[..d]))
        })
        .fold(0.0, f64::max)
}

/// `sup|u| + sup|∇u|` with the Jacobian's spectral norm.
pub fn c1_space_norm(grid: &Grid, slice: &[f64], codim: usize) -> f64 {
    let d = grid.dim();
    let (sup, grad) = (0..grid.node_count())
        .into_par_iter()
        .map(|node| {
            let mut jac = vec![0.0; codim * d];
            jacobian_at(grid, slice, codim, node, &mut jac);
            (
                norm2(&slice[node * codim..(node + 1) * codim]),
                spectral_norm(&jac, codim, d),
            )
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    sup + grad
}

/// `max_t (sup|u_t| + sup|∇u_t|)` over every slice.
pub fn c0t_c1x_norm(field: &SpaceTimeField) -> f64 {
    let g = field.grid();
    (0..g.time_steps())
        .map(|k| c1_space_norm(g, field.slice(k), field.codim()))
        .fold(0.0, f64::max)
}

/// `max_{s≠t} |x_t - x_s| / |t - s|^γ` for a path stored as `times.len()` points of `dim`.
pub fn holder_seminorm(times: &[f64], path: &[f64], dim: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Parameter(format!(
            "Hölder exponent {gamma} not in (0, 1]"
        )));
    }
    if times.len() < 2 || path.len() != times.len() * dim {
        return Err(Error::Parameter("path needs at least two points".into()));
    }
    let n = times.len();
    let mut best = 0.0f64;
    for i in 0..n {
        let xi = &path[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let xj = &path[j * dim..(j + 1) * dim];
            let mut r2 = 0.0;
            for a in 0..dim {
                let v = xj[a] - xi[a];
                r2 += v * v;
            }
            let dt = (times[j] - times[i]).abs();
            best = best.max(r2.sqrt() / dt.powf(gamma));
        }
    }
    Ok(best)
}

/// `max_t |x_t|` of a stored path.
pub fn path_sup(path: &[f64], dim: usize) -> f64 {
    path.chunks(dim).map(norm2).fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric `n × n` matrix (`n ≤ 3`), ascending.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> [f64; MAX_DIM] {
    match n {
        1 => [a[0], 0.0, 0.0],
        2 => {
            let (p, q, r) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
            let mean = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            [mean - rad, mean + rad, 0.0]
        }
        3 => {
            let s = |i: usize, j: usize| 0.5 * (a[i * 3 + j] + a[j * 3 + i]);
            let p1 = s(0, 1).powi(2) + s(0, 2).powi(2) + s(1, 2).powi(2);
            let tr = s(0, 0) + s(1, 1) + s(2, 2);
            if p1 == 0.0 {
                let mut e = [s(0, 0), s(1, 1), s(2, 2)];
                e.sort_by(f64::total_cmp);
                return e;
            }
            let q = tr / 3.0;
            let p2 =
                (s(0, 0) - q).powi(2) + (s(1, 1) - q).powi(2) + (s(2, 2) - q).powi(2) + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let b = |i: usize, j: usize| (s(i, j) - if i == j { q } else { 0.0 }) / p;
            let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
            let r = (0.5 * det).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            let e2 = 3.0 * q - e1 - e3;
            let mut e = [e1, e2, e3];
            e.sort_by(f64::total_cmp);
            e
        }
        _ => panic!("sym_eigenvalues supports n <= 3"),
    }
}

/// `JᵀJ` for a row-major `rows × cols` matrix.
fn gram(mat: &[f64], rows: usize, cols: usize) -> [f64; MAX_DIM * MAX_DIM] {
    let mut g = [0.0; MAX_DIM * MAX_DIM];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows)
                .map(|r| mat[r * cols + i] * mat[r * cols + j])
                .sum();
        }
    }
    g
}

/// Largest singular value of a row-major `rows × cols` matrix, `cols ≤ 3`.
pub fn spectral_norm(mat: &[f64], rows: usize, cols: usize) -> f64 {
    if cols == 1 {
        return norm2(&mat[..rows]);
    }
    let g = gram(mat, rows, cols);
    sym_eigenvalues(&g[..cols * cols], cols)[cols - 1]
        .max(0.0)
        .sqrt()
}

/// Smallest singular value of a square `n × n` matrix, `n ≤ 3`.
pub fn min_singular_value(mat: &[f64], n: usize) -> f64 {
    let g = gram(mat, n, n);
    sym_eigenvalues(&g[..n * n], n)[0].max(0.0).sqrt()
}
