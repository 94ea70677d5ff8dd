//! Backward parabolic solve for the Zvonkin corrector and the transform
//! `Φ_t(x) = x + u_t(x)`.
//!
//! The equation `∂_t u + ½a:D²u + g·∇u − λu = −f`, `u(T) = 0`, is stepped
//! backwards from `T` with the fully implicit scheme
//! `(I − Δt L_j) u_j = u_{j+1} + Δt f_j`, where `L_j` uses the coefficients
//! of slice `j` (piecewise-constant-left in time), centered second
//! differences, upwind first differences and zero Dirichlet data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm2, Grid, SpaceTimeField, MAX_DIM};
use crate::linalg::{self, CsrMatrix};
use crate::norms;

/// Relative residual required of every linear solve.
pub const SOLVER_TOLERANCE: f64 = 1e-10;
const MAX_SOLVER_ITERATIONS: usize = 5000;
/// Step tolerance of the fixed-point inversion of `Φ_t`.
pub const INVERSE_TOLERANCE: f64 = 1e-10;
pub const INVERSE_MAX_ITERATIONS: usize = 40;
/// Doublings of `λ` attempted by [`calibrate_lambda`].
pub const MAX_DOUBLINGS: usize = 20;
/// Target of the calibration `‖u‖_{C⁰_t C¹_x} ≤ 1/2`.
pub const CALIBRATION_TARGET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub lambda: f64,
    pub c0c1_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ZvonkinSolution {
    pub u: SpaceTimeField,
    /// Row-major Jacobian `∂_j u^i`, codimension `m·d`.
    pub grad_u: SpaceTimeField,
    pub lambda_bar: f64,
    pub c0c1_norm: f64,
    /// `max_node max_{s≠t} |u_t − u_s| / |t − s|^{1/2}`.
    pub c_half_t_norm: f64,
    /// Largest `‖b − A x‖_∞` over all time steps and components.
    pub residual_linf: f64,
    pub solver_iterations: usize,
    /// Every `λ` tried during calibration, in order.
    pub scan: Vec<ScanEntry>,
}

impl ZvonkinSolution {
    pub fn grid(&self) -> &Grid {
        self.u.grid()
    }

    /// Builds a solution record around a prescribed corrector `u`.
    pub fn from_field(u: SpaceTimeField, lambda_bar: f64) -> Self {
        let grad_u = u.jacobian();
        let c0c1_norm = norms::c0t_c1x_norm(&u);
        let c_half_t_norm = half_time_holder(&u);
        Self {
            u,
            grad_u,
            lambda_bar,
            c0c1_norm,
            c_half_t_norm,
            residual_linf: 0.0,
            solver_iterations: 0,
            scan: vec![ScanEntry {
                lambda: lambda_bar,
                c0c1_norm,
            }],
        }
    }
}

/// Largest nodal time-Hölder-½ quotient over all pairs of slices.
pub fn half_time_holder(u: &SpaceTimeField) -> f64 {
    let grid = u.grid();
    let k = grid.time_steps();
    let times = grid.times();
    let m = u.codim();
    (0..grid.node_count())
        .into_par_iter()
        .map(|node| {
            let mut best = 0.0f64;
            for i in 0..k {
                let ui = u.node_value(i, node);
                for j in i + 1..k {
                    let uj = u.node_value(j, node);
                    let mut r2 = 0.0;
                    for c in 0..m {
                        r2 += (uj[c] - ui[c]).powi(2);
                    }
                    best = best.max(r2.sqrt() / (times[j] - times[i]).sqrt());
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

fn check_operator_inputs(
    a: &SpaceTimeField,
    g: &SpaceTimeField,
    f: &SpaceTimeField,
    lambda: f64,
) -> Result<()> {
    let grid = f.grid();
    let d = grid.dim();
    if a.grid() != grid || g.grid() != grid {
        return Err(Error::Parameter(
            "PDE coefficients must share the grid of f".into(),
        ));
    }
    if a.codim() != d * d || g.codim() != d {
        return Err(Error::Parameter(format!(
            "expected a with codim {} and g with codim {d}, got {} and {}",
            d * d,
            a.codim(),
            g.codim()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "lambda = {lambda} must be finite and >= 0"
        )));
    }
    for k in 0..grid.time_steps() {
        for node in 0..grid.node_count() {
            let ev = norms::sym_eigenvalues(a.node_value(k, node), d);
            if ev[0] <= 0.0 {
                return Err(Error::Ellipticity {
                    time_index: k,
                    node,
                    detail: format!("diffusion matrix has eigenvalue {:e}", ev[0]),
                });
            }
        }
    }
    Ok(())
}

/// Maps every node to its unknown index, `None` on the boundary.
fn interior_map(grid: &Grid) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut map = vec![None; grid.node_count()];
    let mut nodes = Vec::new();
    for (node, slot) in map.iter_mut().enumerate() {
        if !grid.is_boundary(node) {
            *slot = Some(nodes.len());
            nodes.push(node);
        }
    }
    (map, nodes)
}

/// Assembles `I − Δt L` on the interior unknowns for one coefficient slice.
fn assemble(
    grid: &Grid,
    a: &[f64],
    g: &[f64],
    lambda: f64,
    dt: f64,
    map: &[Option<usize>],
    nodes: &[usize],
) -> Result<CsrMatrix> {
    let d = grid.dim();
    let h = grid.spacing();
    let h2 = h * h;
    let rows = nodes
        .par_iter()
        .map(|&node| {
            let idx = grid.multi_index(node);
            let aa = &a[node * d * d..(node + 1) * d * d];
            let gg = &g[node * d..(node + 1) * d];
            let me = map[node].expect("interior node");
            let mut row = Vec::with_capacity(1 + 2 * d + 4 * d * (d - 1) / 2);
            let mut diag = 1.0 + dt * lambda;
            let push = |offs: &[(usize, isize)], v: f64, row: &mut Vec<(usize, f64)>| {
                let mut j = idx;
                for &(axis, o) in offs {
                    j[axis] = (j[axis] as isize + o) as usize;
                }
                if let Some(col) = map[grid.node_index(&j[..d])] {
                    row.push((col, v));
                }
            };
            for j in 0..d {
                let c = 0.5 * dt * aa[j * d + j] / h2;
                diag += 2.0 * c;
                push(&[(j, 1)], -c, &mut row);
                push(&[(j, -1)], -c, &mut row);
                let adv = dt * gg[j] / h;
                if gg[j] > 0.0 {
                    diag += adv;
                    push(&[(j, 1)], -adv, &mut row);
                } else if gg[j] < 0.0 {
                    diag -= adv;
                    push(&[(j, -1)], adv, &mut row);
                }
                for k in j + 1..d {
                    let ajk = 0.5 * (aa[j * d + k] + aa[k * d + j]);
                    if ajk == 0.0 {
                        continue;
                    }
                    let c = dt * ajk / (4.0 * h2);
                    push(&[(j, 1), (k, 1)], -c, &mut row);
                    push(&[(j, -1), (k, -1)], -c, &mut row);
                    push(&[(j, 1), (k, -1)], c, &mut row);
                    push(&[(j, -1), (k, 1)], c, &mut row);
                }
            }
            row.push((me, diag));
            row
        })
        .collect();
    CsrMatrix::from_rows(nodes.len(), rows)
}

/// Solves the backward equation componentwise for a vector-valued `f`.
pub fn solve_backward_pde(
    a: &SpaceTimeField,
    g: &SpaceTimeField,
    f: &SpaceTimeField,
    lambda: f64,
) -> Result<ZvonkinSolution> {
    check_operator_inputs(a, g, f, lambda)?;
    let grid = *f.grid();
    let m = f.codim();
    let dt = grid.time_step();
    let k_slices = grid.time_steps();
    let (map, nodes) = interior_map(&grid);
    let n = nodes.len();
    let mut u = SpaceTimeField::zeros(grid, m);
    let mut matrix: Option<(usize, CsrMatrix)> = None;
    let mut residual_linf = 0.0f64;
    let mut iterations = 0usize;
    let use_thomas = grid.dim() == 1;

    for j in (0..k_slices - 1).rev() {
        let reuse = matches!(&matrix, Some((k, _))
            if a.slice(*k) == a.slice(j) && g.slice(*k) == g.slice(j));
        if !reuse {
            matrix = Some((
                j,
                assemble(&grid, a.slice(j), g.slice(j), lambda, dt, &map, &nodes)?,
            ));
        }
        let mat = &matrix.as_ref().expect("assembled").1;
        let next = u.slice(j + 1).to_vec();
        let fj = f.slice(j);
        let solved: Vec<(Vec<f64>, f64, usize)> = (0..m)
            .into_par_iter()
            .map(|c| -> Result<(Vec<f64>, f64, usize)> {
                let rhs: Vec<f64> = nodes
                    .iter()
                    .map(|&nd| next[nd * m + c] + dt * fj[nd * m + c])
                    .collect();
                if use_thomas {
                    let x = linalg::solve_tridiagonal(mat, &rhs)?;
                    let r = mat.residual_inf(&x, &rhs);
                    if r > SOLVER_TOLERANCE * linalg::inf_norm(&rhs).max(1.0) {
                        return Err(Error::SolverDivergence {
                            iterations: 1,
                            residual: r,
                        });
                    }
                    Ok((x, r, 1))
                } else {
                    let mut x: Vec<f64> = nodes.iter().map(|&nd| next[nd * m + c]).collect();
                    let stats = linalg::bicgstab(
                        mat,
                        &rhs,
                        &mut x,
                        SOLVER_TOLERANCE,
                        MAX_SOLVER_ITERATIONS,
                    )?;
                    Ok((x, stats.residual_inf, stats.iterations))
                }
            })
            .collect::<Result<_>>()?;
        let out = u.slice_mut(j);
        for (c, (x, r, it)) in solved.into_iter().enumerate() {
            residual_linf = residual_linf.max(r);
            iterations += it;
            for (i, &nd) in nodes.iter().enumerate() {
                out[nd * m + c] = x[i];
            }
        }
        debug_assert_eq!(n, nodes.len());
    }
    let mut sol = ZvonkinSolution::from_field(u, lambda);
    sol.residual_linf = residual_linf;
    sol.solver_iterations = iterations;
    Ok(sol)
}

/// Doubles `λ` from `lambda0` until `‖u‖_{C⁰_t C¹_x} ≤ 1/2` with `f = g = b²`.
pub fn calibrate_lambda(
    a: &SpaceTimeField,
    b2: &SpaceTimeField,
    lambda0: f64,
) -> Result<ZvonkinSolution> {
    if !(lambda0.is_finite() && lambda0 > 0.0) {
        return Err(Error::Parameter(format!(
            "initial lambda {lambda0} must be positive"
        )));
    }
    let mut scan = Vec::new();
    let mut lambda = lambda0;
    let mut last = f64::INFINITY;
    for _ in 0..=MAX_DOUBLINGS {
        let mut sol = solve_backward_pde(a, b2, b2, lambda)?;
        scan.push(ScanEntry {
            lambda,
            c0c1_norm: sol.c0c1_norm,
        });
        last = sol.c0c1_norm;
        if sol.c0c1_norm <= CALIBRATION_TARGET {
            sol.scan = scan;
            return Ok(sol);
        }
        lambda *= 2.0;
    }
    Err(Error::Calibration {
        achieved: last,
        lambda: lambda / 2.0,
    })
}

/// `λ^δ ‖u^λ‖_{C⁰_t C¹_x}` over a ladder of `λ`, with `δ = ε / (2(1+ε))`.
pub fn lambda_delta_monitor(
    a: &SpaceTimeField,
    b2: &SpaceTimeField,
    lambdas: &[f64],
    epsilon: f64,
) -> Result<Vec<(f64, f64, f64)>> {
    let delta = monitor_delta(epsilon);
    lambdas
        .iter()
        .map(|&l| {
            let sol = solve_backward_pde(a, b2, b2, l)?;
            Ok((l, sol.c0c1_norm, l.powf(delta) * sol.c0c1_norm))
        })
        .collect()
}

pub fn monitor_delta(epsilon: f64) -> f64 {
    epsilon / (2.0 * (1.0 + epsilon))
}

/// `Φ_t(x) = x + u_t(x)`.
pub fn phi(sol: &ZvonkinSolution, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    phi_into(sol, t, x, &mut out)?;
    Ok(out)
}

fn phi_into(sol: &ZvonkinSolution, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    if sol.u.codim() != x.len() {
        return Err(Error::Parameter("Φ needs u with codimension d".into()));
    }
    sol.u.evaluate_into(t, x, out)?;
    for (o, xi) in out.iter_mut().zip(x) {
        *o += xi;
    }
    Ok(())
}

/// `Φ_t⁻¹(y)` by the iteration `x ← y − u_t(x)`.
pub fn phi_inverse(sol: &ZvonkinSolution, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    phi_inverse_counted(sol, t, y).map(|r| r.0)
}

/// As [`phi_inverse`], also returning the number of iterations used.
pub fn phi_inverse_counted(sol: &ZvonkinSolution, t: f64, y: &[f64]) -> Result<(Vec<f64>, usize)> {
    let d = y.len();
    if sol.u.codim() != d {
        return Err(Error::Parameter("Φ⁻¹ needs u with codimension d".into()));
    }
    let k = sol.grid().time_index(t).ok_or_else(|| Error::OutOfDomain {
        time: t,
        point: y.to_vec(),
    })?;
    phi_inverse_slice(sol, k, y)
}

pub(crate) fn phi_inverse_slice(
    sol: &ZvonkinSolution,
    k: usize,
    y: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let d = y.len();
    let mut x = y.to_vec();
    let mut ux = [0.0; MAX_DIM];
    let mut step = f64::INFINITY;
    for it in 1..=INVERSE_MAX_ITERATIONS {
        sol.u.evaluate_slice_into(k, &x, &mut ux[..d])?;
        step = 0.0;
        for a in 0..d {
            let nx = y[a] - ux[a];
            step = step.max((nx - x[a]).abs());
            x[a] = nx;
        }
        if !sol.grid().contains(&x) {
            return Err(Error::OutOfDomain {
                time: sol.grid().time(k),
                point: x,
            });
        }
        if step <= INVERSE_TOLERANCE {
            return Ok((x, it));
        }
    }
    Err(Error::SolverDivergence {
        iterations: INVERSE_MAX_ITERATIONS,
        residual: step,
    })
}

/// Sampling controls for [`verify_transform_properties`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyCheck {
    pub pairs: usize,
    pub seed: u64,
    /// Allowed slack around the interval `[1/2, 2]`.
    pub tolerance: f64,
    /// Samples stay this far from the boundary of the box.
    pub margin: f64,
}

impl Default for PropertyCheck {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            seed: 7,
            tolerance: 0.02,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    pub time: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyReport {
    pub certificate: String,
    pub pairs: usize,
    pub tolerance: f64,
    pub phi_min_ratio: f64,
    pub phi_max_ratio: f64,
    pub inverse_min_ratio: f64,
    pub inverse_max_ratio: f64,
    pub worst_phi: Option<Witness>,
    pub worst_inverse: Option<Witness>,
    pub inversion_failures: usize,
    pub max_round_trip_error: f64,
    pub max_inverse_iterations: usize,
    /// Largest sampled `|Φ_t(x) − Φ_s(x)| / |t − s|^{1/2}`.
    pub time_constant: f64,
    pub c_half_t_norm: f64,
    pub ratio_violations: usize,
    pub passed: bool,
}

/// Round-trip tolerance `|Φ_t(Φ_t⁻¹(y)) − y|`.
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-9;

fn ratio_outside(r: f64, tol: f64) -> bool {
    !(r >= 0.5 - tol && r <= 2.0 + tol)
}

/// Samples point pairs and time pairs and checks the bi-Lipschitz bounds of
/// `Φ_t` and `Φ_t⁻¹` together with the time-½ increment bound.
pub fn verify_transform_properties(
    sol: &ZvonkinSolution,
    check: &PropertyCheck,
) -> Result<PropertyReport> {
    let grid = *sol.grid();
    let d = grid.dim();
    if sol.u.codim() != d {
        return Err(Error::Parameter(
            "transform needs u with codimension d".into(),
        ));
    }
    let reach = grid.half_width() - check.margin;
    if reach <= 0.0 {
        return Err(Error::Parameter(format!(
            "margin {} leaves no interior",
            check.margin
        )));
    }
    let h = grid.spacing();
    let times = grid.times();
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut report = PropertyReport {
        certificate: "transform-properties".into(),
        pairs: check.pairs,
        tolerance: check.tolerance,
        phi_min_ratio: f64::INFINITY,
        phi_max_ratio: 0.0,
        inverse_min_ratio: f64::INFINITY,
        inverse_max_ratio: 0.0,
        worst_phi: None,
        worst_inverse: None,
        inversion_failures: 0,
        max_round_trip_error: 0.0,
        max_inverse_iterations: 0,
        time_constant: 0.0,
        c_half_t_norm: sol.c_half_t_norm,
        ratio_violations: 0,
        passed: false,
    };
    let mut worst_phi_dev = -1.0;
    let mut worst_inv_dev = -1.0;
    let deviation = |r: f64| (0.5 - r).max(r - 2.0);

    for pair in 0..check.pairs {
        let k = rng.random_range(0..grid.time_steps());
        let t = times[k];
        let mut a = [0.0; MAX_DIM];
        let mut b = [0.0; MAX_DIM];
        for i in 0..d {
            a[i] = rng.random_range(-reach..reach);
        }
        if pair % 2 == 0 {
            // short separations probe the cell-level Lipschitz constant
            let r = h * 10f64.powf(rng.random_range(-1.0..0.7));
            let mut dir = [0.0; MAX_DIM];
            for v in dir.iter_mut().take(d) {
                *v = rng.random_range(-1.0..1.0);
            }
            let nd = norm2(&dir[..d]).max(1e-12);
            for i in 0..d {
                b[i] = (a[i] + r * dir[i] / nd).clamp(-reach, reach);
            }
        } else {
            for v in b.iter_mut().take(d) {
                *v = rng.random_range(-reach..reach);
            }
        }
        let (a, b) = (&a[..d], &b[..d]);
        let sep = dist(a, b);
        if sep == 0.0 {
            continue;
        }
        let pa = phi(sol, t, a)?;
        let pb = phi(sol, t, b)?;
        let r = dist(&pa, &pb) / sep;
        report.phi_min_ratio = report.phi_min_ratio.min(r);
        report.phi_max_ratio = report.phi_max_ratio.max(r);
        if ratio_outside(r, check.tolerance) {
            report.ratio_violations += 1;
        }
        if deviation(r) > worst_phi_dev {
            worst_phi_dev = deviation(r);
            report.worst_phi = Some(Witness {
                time: t,
                a: a.to_vec(),
                b: b.to_vec(),
                ratio: r,
            });
        }

        match (
            phi_inverse_counted(sol, t, a),
            phi_inverse_counted(sol, t, b),
        ) {
            (Ok((ia, na)), Ok((ib, nb))) => {
                report.max_inverse_iterations = report.max_inverse_iterations.max(na).max(nb);
                let r = dist(&ia, &ib) / sep;
                report.inverse_min_ratio = report.inverse_min_ratio.min(r);
                report.inverse_max_ratio = report.inverse_max_ratio.max(r);
                if ratio_outside(r, check.tolerance) {
                    report.ratio_violations += 1;
                }
                if deviation(r) > worst_inv_dev {
                    worst_inv_dev = deviation(r);
                    report.worst_inverse = Some(Witness {
                        time: t,
                        a: a.to_vec(),
                        b: b.to_vec(),
                        ratio: r,
                    });
                }
                let back = phi(sol, t, &ia)?;
                report.max_round_trip_error = report.max_round_trip_error.max(dist(&back, a));
            }
            _ => report.inversion_failures += 1,
        }

        let s = rng.random_range(0..grid.time_steps());
        if s != k {
            let ps = phi(sol, times[s], a)?;
            let c = dist(&pa, &ps) / (times[s] - t).abs().sqrt();
            report.time_constant = report.time_constant.max(c);
        }
    }
    report.passed = report.ratio_violations == 0
        && report.inversion_failures == 0
        && report.max_round_trip_error <= ROUND_TRIP_TOLERANCE
        && report.time_constant <= sol.c_half_t_norm * (1.0 + 1e-12) + 1e-12;
    Ok(report)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
