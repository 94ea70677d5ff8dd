//! Mollified coefficient sequences, Euler–Maruyama ensembles and the
//! diagnostics standing in for tightness and passage to the limit.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::{norm2, Grid, SpaceTimeField, MAX_DIM};
use crate::mollify::mollify;
use crate::norms;
use crate::rng::{self, NoiseStream};
use crate::stats::{self, Moments};
use crate::transform::{x_path_bound, PathConstants};
use crate::zvonkin::ZvonkinSolution;

/// Law of the initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    PointMass {
        point: Vec<f64>,
    },
    /// Isotropic Gaussian conditioned on the box (rejection sampling).
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Resampling with replacement from stored points (row-major).
    Empirical {
        points: Vec<f64>,
    },
}

const MAX_REJECTIONS: usize = 10_000;

impl InitialLaw {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let d = grid.dim();
        let ok = match self {
            Self::PointMass { point } => point.len() == d && grid.contains(point),
            Self::Gaussian { mean, std } => {
                mean.len() == d && grid.contains(mean) && *std >= 0.0 && std.is_finite()
            }
            Self::Uniform { lower, upper } => {
                lower.len() == d
                    && upper.len() == d
                    && lower.iter().zip(upper).all(|(l, u)| l < u)
                    && grid.contains(lower)
                    && grid.contains(upper)
            }
            Self::Empirical { points } => {
                !points.is_empty()
                    && points.len() % d == 0
                    && points.chunks(d).all(|p| grid.contains(p))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "initial law {self:?} is not supported inside the box"
            )))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, grid: &Grid, out: &mut [f64]) -> Result<()> {
        match self {
            Self::PointMass { point } => out.copy_from_slice(point),
            Self::Gaussian { mean, std } => {
                for _ in 0..MAX_REJECTIONS {
                    for (o, m) in out.iter_mut().zip(mean) {
                        *o = m + std * rng::standard_normal(rng);
                    }
                    if grid.contains(out) {
                        return Ok(());
                    }
                }
                return Err(Error::Parameter(
                    "Gaussian initial law puts almost no mass in the box".into(),
                ));
            }
            Self::Uniform { lower, upper } => {
                for (a, o) in out.iter_mut().enumerate() {
                    *o = lower[a] + (upper[a] - lower[a]) * rng::uniform(rng);
                }
            }
            Self::Empirical { points } => {
                let d = out.len();
                let n = points.len() / d;
                let i = ((rng::uniform(rng) * n as f64) as usize).min(n - 1);
                out.copy_from_slice(&points[i * d..(i + 1) * d]);
            }
        }
        Ok(())
    }

    /// `E|X₀|`; closed form where available, otherwise a midpoint rule.
    ///
    /// The Gaussian value ignores truncation to the box.
    pub fn first_moment(&self) -> f64 {
        match self {
            Self::PointMass { point } => norm2(point),
            Self::Gaussian { mean, std } if mean.iter().all(|&m| m == 0.0) => {
                let c = match mean.len() {
                    1 => (2.0 / std::f64::consts::PI).sqrt(),
                    2 => (std::f64::consts::PI / 2.0).sqrt(),
                    _ => 2.0 * (2.0 / std::f64::consts::PI).sqrt(),
                };
                c * std
            }
            Self::Gaussian { mean, std } => {
                // Gauss–Hermite-free fallback: deterministic Monte Carlo
                let mut rng = rng::initial_law_rng(0, u64::MAX);
                let n = 200_000;
                let mut s = 0.0;
                for _ in 0..n {
                    let mut r2 = 0.0;
                    for m in mean {
                        let v = m + std * rng::standard_normal(&mut rng);
                        r2 += v * v;
                    }
                    s += r2.sqrt();
                }
                s / n as f64
            }
            Self::Uniform { lower, upper } => {
                let d = lower.len();
                let m = 64usize;
                let total = m.pow(d as u32);
                let mut s = 0.0;
                let mut x = [0.0; MAX_DIM];
                for flat in 0..total {
                    let mut rest = flat;
                    for a in 0..d {
                        let i = rest % m;
                        rest /= m;
                        x[a] = lower[a] + (upper[a] - lower[a]) * (i as f64 + 0.5) / m as f64;
                    }
                    s += norm2(&x[..d]);
                }
                s / total as f64
            }
            Self::Empirical { points } => {
                let n = points.len() / self.dim();
                points.chunks(self.dim()).map(norm2).sum::<f64>() / n as f64
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::PointMass { point } => point.len(),
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Uniform { lower, .. } => lower.len(),
            Self::Empirical { .. } => 0,
        }
    }
}

/// Pointwise drift and diffusion of an SDE on a box.
pub trait SdeCoefficients: Sync {
    fn dim(&self) -> usize;
    fn half_width(&self) -> f64;
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
    /// Row-major `d × d`.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .all(|v| v.is_finite() && v.abs() <= self.half_width())
    }
}

/// Coefficients given by sampled fields, `b = b¹ + b²`.
#[derive(Debug, Clone)]
pub struct FieldCoefficients {
    pub drift: SpaceTimeField,
    pub sigma: SpaceTimeField,
}

impl FieldCoefficients {
    pub fn from_set(set: &CoefficientSet) -> Self {
        Self {
            drift: set.drift(),
            sigma: set.sigma.clone(),
        }
    }
}

impl SdeCoefficients for FieldCoefficients {
    fn dim(&self) -> usize {
        self.drift.grid().dim()
    }

    fn half_width(&self) -> f64 {
        self.drift.grid().half_width()
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.drift.evaluate_into(t, x, out)
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.sigma.evaluate_into(t, x, out)
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.drift.grid().contains(x)
    }
}

type PointFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Coefficients given by closures, for closed-form test problems.
pub struct FnCoefficients {
    pub dim: usize,
    pub half_width: f64,
    pub drift: PointFn,
    pub diffusion: PointFn,
}

impl SdeCoefficients for FnCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn half_width(&self) -> f64 {
        self.half_width
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(t, x, out);
        Ok(())
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.diffusion)(t, x, out);
        Ok(())
    }
}

/// Time stepping and reporting controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Store every `report_every`-th state.
    pub report_every: usize,
    pub master_seed: u64,
}

impl SimulationConfig {
    /// Number of Euler steps; `dt` must divide the horizon.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.horizon > 0.0) || self.n_paths == 0 || self.report_every == 0 {
            return Err(Error::Parameter(
                "simulation needs positive dt, horizon, paths and report stride".into(),
            ));
        }
        let s = (self.horizon / self.dt).round();
        if (s * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::Parameter(format!(
                "dt = {} does not divide T = {}",
                self.dt, self.horizon
            )));
        }
        let s = s as usize;
        if !s.is_multiple_of(self.report_every) {
            return Err(Error::Parameter(format!(
                "report stride {} does not divide {s} steps",
                self.report_every
            )));
        }
        Ok(s)
    }

    pub fn report_times(&self) -> Result<Vec<f64>> {
        let s = self.steps()?;
        Ok((0..=s / self.report_every)
            .map(|i| (i * self.report_every) as f64 * self.dt)
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    /// `paths[(path * times.len() + i) * dim + c]`.
    pub paths: Vec<f64>,
    /// Noise stream index of each path.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub mollification_level: usize,
    pub exit_flags: Vec<bool>,
    /// Euler step at which the path left the box.
    pub exit_steps: Vec<Option<usize>>,
    pub config: SimulationConfig,
    pub box_half_width: f64,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.exit_flags.len()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.times.len() * self.dim;
        &self.paths[p * len..(p + 1) * len]
    }

    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let off = (p * self.times.len() + i) * self.dim;
        &self.paths[off..off + self.dim]
    }

    pub fn exit_fraction(&self) -> f64 {
        self.exit_flags.iter().filter(|&&e| e).count() as f64 / self.n_paths() as f64
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths()).filter(|&p| !self.exit_flags[p])
    }

    /// Index of `t` on the reporting grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * self.config.horizon.max(1.0))
            .ok_or_else(|| Error::Parameter(format!("time {t} is not on the reporting grid")))
    }

    /// States of non-exited paths at reporting index `i`, row-major.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        self.kept()
            .flat_map(|p| self.state(p, i).to_vec())
            .collect()
    }

    /// Sample mean of `|X₀|` over all paths.
    pub fn initial_first_moment(&self) -> f64 {
        (0..self.n_paths())
            .map(|p| norm2(self.state(p, 0)))
            .sum::<f64>()
            / self.n_paths() as f64
    }
}

struct PathOutcome {
    stored: Vec<f64>,
    exit_step: Option<usize>,
}

fn run_path<C: SdeCoefficients + ?Sized>(
    coeffs: &C,
    x0: &[f64],
    path: u64,
    config: &SimulationConfig,
    steps: usize,
    mut visit: impl FnMut(usize, f64, &[f64], &[f64], &[f64], &[f64]),
) -> Result<PathOutcome> {
    let d = coeffs.dim();
    let n_report = steps / config.report_every + 1;
    let mut stored = Vec::with_capacity(n_report * d);
    let mut x = [0.0; MAX_DIM];
    x[..d].copy_from_slice(x0);
    stored.extend_from_slice(&x[..d]);
    let mut noise = NoiseStream::new(config.master_seed, path);
    let sq = config.dt.sqrt();
    let mut b = [0.0; MAX_DIM];
    let mut s = [0.0; MAX_DIM * MAX_DIM];
    let mut xi = [0.0; MAX_DIM];
    let mut exit_step = None;
    for k in 0..steps {
        let t = k as f64 * config.dt;
        noise.next_normals(&mut xi[..d]);
        if exit_step.is_none() {
            coeffs.drift(t, &x[..d], &mut b[..d])?;
            coeffs.diffusion(t, &x[..d], &mut s[..d * d])?;
            visit(k, t, &x[..d], &b[..d], &s[..d * d], &xi[..d]);
            let mut next = [0.0; MAX_DIM];
            for i in 0..d {
                let mut noise_term = 0.0;
                for j in 0..d {
                    noise_term += s[i * d + j] * xi[j];
                }
                next[i] = x[i] + b[i] * config.dt + noise_term * sq;
            }
            if next[..d].iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulation {
                    path: path as usize,
                    step: k,
                });
            }
            if coeffs.contains(&next[..d]) {
                x = next;
            } else {
                exit_step = Some(k + 1);
            }
        }
        if (k + 1) % config.report_every == 0 {
            stored.extend_from_slice(&x[..d]);
        }
    }
    Ok(PathOutcome { stored, exit_step })
}

/// Initial positions of every path, drawn from a key separate from the noise.
fn initial_states(
    mu0: &InitialLaw,
    grid_box: &Grid,
    config: &SimulationConfig,
) -> Result<Vec<f64>> {
    let d = grid_box.dim();
    mu0.validate(grid_box)?;
    let mut out = vec![0.0; config.n_paths * d];
    out.par_chunks_mut(d).enumerate().try_for_each(|(p, o)| {
        let mut r = rng::initial_law_rng(config.master_seed, p as u64);
        mu0.sample(&mut r, grid_box, o)
    })?;
    Ok(out)
}

fn box_grid(coeffs: &dyn SdeCoefficients, horizon: f64) -> Result<Grid> {
    Grid::new(coeffs.dim(), coeffs.half_width(), 8, horizon, 2)
}

/// Euler–Maruyama ensemble with noise keyed by `(master seed, path, step)`.
pub fn euler_maruyama<C: SdeCoefficients>(
    coeffs: &C,
    mu0: &InitialLaw,
    config: &SimulationConfig,
    level: usize,
) -> Result<PathEnsemble> {
    let steps = config.steps()?;
    let d = coeffs.dim();
    if d == 0 || d > MAX_DIM {
        return Err(Error::Parameter(format!("dimension {d} unsupported")));
    }
    let bx = box_grid(coeffs, config.horizon)?;
    let x0 = initial_states(mu0, &bx, config)?;
    let outcomes: Vec<PathOutcome> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            run_path(
                coeffs,
                &x0[p * d..(p + 1) * d],
                p as u64,
                config,
                steps,
                |_, _, _, _, _, _| {},
            )
        })
        .collect::<Result<_>>()?;
    let times = config.report_times()?;
    let mut paths = Vec::with_capacity(config.n_paths * times.len() * d);
    let mut exit_flags = Vec::with_capacity(config.n_paths);
    let mut exit_steps = Vec::with_capacity(config.n_paths);
    for o in outcomes {
        paths.extend(o.stored);
        exit_flags.push(o.exit_step.is_some());
        exit_steps.push(o.exit_step);
    }
    Ok(PathEnsemble {
        times,
        dim: d,
        paths,
        seeds: (0..config.n_paths as u64).collect(),
        master_seed: config.master_seed,
        mollification_level: level,
        exit_flags,
        exit_steps,
        config: *config,
        box_half_width: coeffs.half_width(),
    })
}

/// Re-runs one path, handing every Euler step `(k, t, X_k, b, σ, ξ_k)` to `visit`.
pub fn replay_path<C: SdeCoefficients>(
    coeffs: &C,
    ensemble: &PathEnsemble,
    path: usize,
    visit: impl FnMut(usize, f64, &[f64], &[f64], &[f64], &[f64]),
) -> Result<()> {
    let steps = ensemble.config.steps()?;
    let x0 = ensemble.state(path, 0).to_vec();
    run_path(
        coeffs,
        &x0,
        ensemble.seeds[path],
        &ensemble.config,
        steps,
        visit,
    )
    .map(|_| ())
}

/// Mollification scale `δ_n = 2^{-n} δ₀`.
pub fn level_scale(delta0: f64, n: usize) -> f64 {
    delta0 * 0.5f64.powi(n as i32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollificationCertificate {
    pub certificate: String,
    pub level: usize,
    pub delta: f64,
    /// `max_t (h_t − env(b^{1,n}_t))`-style margins, one per slice.
    pub envelope_margins: Vec<f64>,
    /// `‖b^{2,n}‖_{L^∞_t L̃^{d+ε}_x}`.
    pub b2_uniformly_local: f64,
    /// `‖σⁿ − σ‖_∞`.
    pub sigma_deviation: f64,
    pub passed: bool,
}

/// Level-`n` mollified coefficients with their uniform-bound certificate.
///
/// `h` is the growth envelope of the unmollified `b¹` (one value per slice).
pub fn mollified_sequence(
    coeffs: &CoefficientSet,
    n: usize,
    delta0: f64,
    h: &[f64],
    epsilon: f64,
) -> Result<(CoefficientSet, MollificationCertificate)> {
    let grid = *coeffs.b1.grid();
    let d = grid.dim();
    if h.len() != grid.time_steps() {
        return Err(Error::Parameter(
            "growth envelope must have one value per slice".into(),
        ));
    }
    let delta = level_scale(delta0, n);
    let b1 = mollify(&coeffs.b1, delta)?;
    let b2 = mollify(&coeffs.b2, delta)?;
    let sigma = mollify(&coeffs.sigma, delta)?;
    let envelope_margins: Vec<f64> = (0..grid.time_steps())
        .map(|k| h[k] - norms::linear_growth_envelope(&grid, b1.slice(k), d))
        .collect();
    let b2_ul = norms::slice_norms(&b2, d as f64 + epsilon, true)?
        .into_iter()
        .fold(0.0, f64::max);
    let sigma_deviation = sigma
        .values()
        .iter()
        .zip(coeffs.sigma.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let passed = envelope_margins.iter().all(|&m| m >= 0.0) && b2_ul.is_finite();
    let set = coeffs.with_fields(b1, b2, sigma)?;
    Ok((
        set,
        MollificationCertificate {
            certificate: "mollified-sequence".into(),
            level: n,
            delta,
            envelope_margins,
            b2_uniformly_local: b2_ul,
            sigma_deviation,
            passed,
        },
    ))
}

/// `C^γ` norm `sup|x| + ⟦x⟧_γ` of one stored path.
pub fn path_holder_norm(times: &[f64], path: &[f64], dim: usize, gamma: f64) -> Result<f64> {
    Ok(norms::path_sup(path, dim) + norms::holder_seminorm(times, path, dim, gamma)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderMoments {
    pub gamma: f64,
    pub mean: f64,
    pub half_width: f64,
    pub seminorm_mean: f64,
    pub sup_mean: f64,
    pub per_path: Vec<f64>,
}

/// Monte Carlo mean of `‖X‖_{C^γ}` over non-exited paths.
pub fn holder_moment_estimate(ensemble: &PathEnsemble, gamma: f64) -> Result<HolderMoments> {
    let kept: Vec<usize> = ensemble.kept().collect();
    let parts: Vec<(f64, f64)> = kept
        .par_iter()
        .map(|&p| {
            let path = ensemble.path(p);
            Ok((
                norms::path_sup(path, ensemble.dim),
                norms::holder_seminorm(&ensemble.times, path, ensemble.dim, gamma)?,
            ))
        })
        .collect::<Result<_>>()?;
    let per_path: Vec<f64> = parts.iter().map(|(a, b)| a + b).collect();
    let m = Moments::of(&per_path)?;
    let n = parts.len() as f64;
    Ok(HolderMoments {
        gamma,
        mean: m.mean,
        half_width: m.half_width_95(),
        seminorm_mean: parts.iter().map(|p| p.1).sum::<f64>() / n,
        sup_mean: parts.iter().map(|p| p.0).sum::<f64>() / n,
        per_path,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UiRow {
    pub radius: f64,
    pub per_level: Vec<f64>,
    pub sup_over_levels: f64,
}

/// `sup_n Ê[‖Xⁿ‖_{C⁰} 1{‖Xⁿ‖_{C⁰} > R}]` for each radius.
pub fn uniform_integrability_diagnostic(
    ensembles: &[&PathEnsemble],
    radii: &[f64],
) -> Result<Vec<UiRow>> {
    if ensembles.len() < 2 || radii.len() < 3 {
        return Err(Error::Parameter(
            "need at least two levels and three radii".into(),
        ));
    }
    let sups: Vec<Vec<f64>> = ensembles
        .iter()
        .map(|e| {
            e.kept()
                .map(|p| norms::path_sup(e.path(p), e.dim))
                .collect()
        })
        .collect();
    Ok(radii
        .iter()
        .map(|&r| {
            let per_level: Vec<f64> = sups
                .iter()
                .map(|s| s.iter().filter(|&&v| v > r).sum::<f64>() / s.len().max(1) as f64)
                .collect();
            let sup_over_levels = per_level.iter().cloned().fold(0.0, f64::max);
            UiRow {
                radius: r,
                per_level,
                sup_over_levels,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeDistance {
    pub time: f64,
    pub wasserstein_marginals: Vec<f64>,
    pub energy: f64,
}

/// Per-probe-time W₁ on coordinate marginals and joint energy distance.
pub fn convergence_in_law_diagnostic(
    a: &PathEnsemble,
    b: &PathEnsemble,
    probe_times: &[f64],
) -> Result<Vec<ProbeDistance>> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(x, y)| (x - y).abs() > 1e-12)
        || a.dim != b.dim
    {
        return Err(Error::Parameter(
            "ensembles have different reporting grids".into(),
        ));
    }
    probe_times
        .iter()
        .map(|&t| {
            let i = a.time_index(t)?;
            let (ma, mb) = (a.marginal(i), b.marginal(i));
            let d = a.dim;
            let wasserstein_marginals = (0..d)
                .map(|c| {
                    let xa: Vec<f64> = ma.iter().skip(c).step_by(d).copied().collect();
                    let xb: Vec<f64> = mb.iter().skip(c).step_by(d).copied().collect();
                    stats::wasserstein1(&xa, &xb)
                })
                .collect::<Result<_>>()?;
            Ok(ProbeDistance {
                time: t,
                wasserstein_marginals,
                energy: stats::energy_distance(&ma, &mb, d)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftResidual {
    pub level: usize,
    pub b1: f64,
    pub b2: f64,
}

/// `Ê ∫ ψ_R(X) |b^{i,n}(X) − b^{i,m}(X)| dt` on the reporting grid (left
/// rule), for each comparison set.
pub fn drift_residual_diagnostic(
    ensemble: &PathEnsemble,
    base: &CoefficientSet,
    ladder: &[(usize, &CoefficientSet)],
    radius: f64,
) -> Result<Vec<DriftResidual>> {
    let kept: Vec<usize> = ensemble.kept().collect();
    let n_kept = kept.len().max(1) as f64;
    let d = ensemble.dim;
    let nt = ensemble.times.len();
    ladder
        .iter()
        .map(|&(level, other)| {
            let parts = kept
                .par_iter()
                .map(|&p| -> Result<(f64, f64)> {
                    let mut acc = (0.0, 0.0);
                    let mut u = [0.0; MAX_DIM];
                    let mut v = [0.0; MAX_DIM];
                    for i in 0..nt - 1 {
                        let x = ensemble.state(p, i);
                        let w = norms::cutoff(norm2(x) / radius);
                        if w == 0.0 {
                            continue;
                        }
                        let t = ensemble.times[i];
                        let dt = ensemble.times[i + 1] - t;
                        base.b1.evaluate_into(t, x, &mut u[..d])?;
                        other.b1.evaluate_into(t, x, &mut v[..d])?;
                        acc.0 += dt * w * dist(&u[..d], &v[..d]);
                        base.b2.evaluate_into(t, x, &mut u[..d])?;
                        other.b2.evaluate_into(t, x, &mut v[..d])?;
                        acc.1 += dt * w * dist(&u[..d], &v[..d]);
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let (s1, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            Ok(DriftResidual {
                level,
                b1: s1 / n_kept,
                b2: s2 / n_kept,
            })
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakResidual {
    /// `max_paths |X_τ − X₀ − Σ b dt − Σ σ √dt ξ|` up to the stopping step.
    pub max_identity_residual: f64,
    pub drift_integrals: Vec<f64>,
    pub diffusion_integrals: Vec<f64>,
    pub finite_fraction: f64,
}

/// Integral identity of the scheme and integrability of `|b(X)|`, `|σ(X)|²`
/// along every non-exited path, by deterministic replay.
pub fn weak_solution_residual<C: SdeCoefficients>(
    coeffs: &C,
    ensemble: &PathEnsemble,
) -> Result<WeakResidual> {
    let d = ensemble.dim;
    let dt = ensemble.config.dt;
    let sq = dt.sqrt();
    let last = ensemble.times.len() - 1;
    let kept: Vec<usize> = ensemble.kept().collect();
    let rows: Vec<(f64, f64, f64)> = kept
        .par_iter()
        .map(|&p| -> Result<(f64, f64, f64)> {
            let mut drift_sum = [0.0; MAX_DIM];
            let mut noise_sum = [0.0; MAX_DIM];
            let (mut ib, mut is) = (0.0, 0.0);
            replay_path(coeffs, ensemble, p, |_, _, _, b, s, xi| {
                for i in 0..d {
                    drift_sum[i] += b[i] * dt;
                    noise_sum[i] += (0..d).map(|j| s[i * d + j] * xi[j]).sum::<f64>() * sq;
                }
                ib += norm2(b) * dt;
                let op = norms::spectral_norm(s, d, d);
                is += op * op * dt;
            })?;
            let x0 = ensemble.state(p, 0);
            let xt = ensemble.state(p, last);
            let r = (0..d)
                .map(|i| (xt[i] - x0[i] - drift_sum[i] - noise_sum[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok((r, ib, is))
        })
        .collect::<Result<_>>()?;
    let finite = rows
        .iter()
        .filter(|r| r.1.is_finite() && r.2.is_finite())
        .count();
    Ok(WeakResidual {
        max_identity_residual: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        drift_integrals: rows.iter().map(|r| r.1).collect(),
        diffusion_integrals: rows.iter().map(|r| r.2).collect(),
        finite_fraction: finite as f64 / rows.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathBoundCheck {
    pub certificate: String,
    pub path_constant: f64,
    pub fraction_within: f64,
    pub worst_ratio: f64,
    pub paths: usize,
}

/// Compares `‖X‖_{C^γ}` with `C(1 + |X₀| + ‖Z‖_{C^γ})` path by path, where
/// `Z = Σ (I + ∇u(X)) σ(X) √dt ξ` is rebuilt by replay on the reporting grid.
pub fn path_bound_check(
    coeffs: &FieldCoefficients,
    sol: &ZvonkinSolution,
    ensemble: &PathEnsemble,
    constants: &PathConstants,
) -> Result<PathBoundCheck> {
    let d = ensemble.dim;
    let gamma = constants.gamma();
    let c = constants.path_constant()?;
    let sq = ensemble.config.dt.sqrt();
    let every = ensemble.config.report_every;
    let kept: Vec<usize> = ensemble.kept().collect();
    let ratios: Vec<f64> = kept
        .par_iter()
        .map(|&p| -> Result<f64> {
            let mut z = [0.0; MAX_DIM];
            let mut zs = Vec::with_capacity(ensemble.times.len() * d);
            zs.extend_from_slice(&z[..d]);
            let mut jac = [0.0; MAX_DIM * MAX_DIM];
            let mut err = None;
            replay_path(coeffs, ensemble, p, |k, t, x, _, s, xi| {
                if let Err(e) = sol.grad_u.evaluate_into(t, x, &mut jac[..d * d]) {
                    err.get_or_insert(e);
                }
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        let dphi = jac[i * d + j] + if i == j { 1.0 } else { 0.0 };
                        for l in 0..d {
                            acc += dphi * s[j * d + l] * xi[l];
                        }
                    }
                    z[i] += acc * sq;
                }
                if (k + 1) % every == 0 {
                    zs.extend_from_slice(&z[..d]);
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            let z_norm = path_holder_norm(&ensemble.times, &zs, d, gamma)?;
            let x_norm = path_holder_norm(&ensemble.times, ensemble.path(p), d, gamma)?;
            let bound = x_path_bound(norm2(ensemble.state(p, 0)), z_norm, constants)?;
            Ok(x_norm / bound)
        })
        .collect::<Result<_>>()?;
    let within = ratios.iter().filter(|&&r| r <= 1.0).count();
    Ok(PathBoundCheck {
        certificate: "x-path-bound".into(),
        path_constant: c,
        fraction_within: within as f64 / ratios.len().max(1) as f64,
        worst_ratio: ratios.iter().cloned().fold(0.0, f64::max),
        paths: ratios.len(),
    })
}

/// Mean over paths kept in both ensembles of `sup_t |X^a_t − X^b_t|`; the
/// ensembles must share their noise (same seed, paths and reporting grid).
pub fn pathwise_gap(a: &PathEnsemble, b: &PathEnsemble) -> Result<f64> {
    if a.master_seed != b.master_seed
        || a.n_paths() != b.n_paths()
        || a.dim != b.dim
        || a.times != b.times
    {
        return Err(Error::Parameter(
            "pathwise gap needs ensembles driven by the same noise".into(),
        ));
    }
    let gaps: Vec<f64> = (0..a.n_paths())
        .filter(|&p| !a.exit_flags[p] && !b.exit_flags[p])
        .map(|p| {
            a.path(p)
                .chunks(a.dim)
                .zip(b.path(p).chunks(b.dim))
                .map(|(x, y)| dist(x, y))
                .fold(0.0, f64::max)
        })
        .collect();
    if gaps.is_empty() {
        return Err(Error::Parameter("no path survives at both levels".into()));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}
