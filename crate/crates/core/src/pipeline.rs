//! End-to-end run: drift split, corrector, transformed coefficients,
//! mollified ensembles, cross-level diagnostics and densities.
//!
//! Every report written here is a deterministic function of the validated
//! configuration; wall-clock data goes to `metadata.json` only.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::config::{ValidatedConfig, ZvonkinConfig};
use crate::decomposition::{decompose, DecompositionCertificate};
use crate::density::{
    density_mixed_norm_check, duality_check, empirical_density, fokker_planck_residual, test_bank,
    weak_continuity, DensityCertificate, DualityCertificate, EmpiricalDensity, FpReport,
    TEST_BANK_VERSION,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};
use crate::io;
use crate::simulation::{
    convergence_in_law_diagnostic, drift_residual_diagnostic, euler_maruyama,
    holder_moment_estimate, mollified_sequence, path_bound_check, pathwise_gap,
    uniform_integrability_diagnostic, weak_solution_residual, FieldCoefficients,
    MollificationCertificate, PathBoundCheck, PathEnsemble, ProbeDistance, UiRow,
};
use crate::transform::{
    growth_envelope_h, transformed_coefficients, EnvelopeCertificate, GrowthEnvelope, PathConstants,
};
use crate::zvonkin::{
    calibrate_lambda, lambda_delta_monitor, monitor_delta, phi, phi_inverse, solve_backward_pde,
    verify_transform_properties, PropertyReport, ScanEntry, ZvonkinSolution, CALIBRATION_TARGET,
    ROUND_TRIP_TOLERANCE,
};

/// Exit fraction above which the report asks for a larger box.
pub const EXIT_WARNING_FRACTION: f64 = 0.01;
/// Share of paths that must sit under the explicit path bound.
pub const PATH_BOUND_FRACTION: f64 = 0.99;
pub const MOMENT_VARIATION_LIMIT: f64 = 0.10;
pub const DENSITY_VARIATION_LIMIT: f64 = 0.15;
/// Multiples of `λ̄` scanned by the `λ^δ` monitor.
pub const MONITOR_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
/// Paths replayed through `Φ` and `Φ⁻¹` per level.
pub const ROUND_TRIP_PATHS: usize = 200;
/// Tolerance of the scheme identity `X_T − X₀ − ∫b dt − Σσ√dt ξ = 0`.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

pub mod stage {
    pub const DECOMPOSE: &str = "decompose";
    pub const ZVONKIN: &str = "zvonkin";
    pub const TRANSFORM: &str = "transform";
    pub const SIMULATE: &str = "simulate";
    pub const DIAGNOSTICS: &str = "diagnostics";
    pub const DENSITY: &str = "density";
    pub const REPORT: &str = "report";
}

trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Reports are written here when set.
    pub output_dir: Option<PathBuf>,
    /// Also dump every level's ensemble in binary form.
    pub write_ensembles: bool,
    /// Stage progress on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckStatus {
    pub name: String,
    pub passed: bool,
}

fn status(name: impl Into<String>, passed: bool) -> CheckStatus {
    CheckStatus {
        name: name.into(),
        passed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub certificate: String,
    pub name: String,
    pub master_seed: u64,
    /// Bound checks; any failure makes the run fail.
    pub certificates: Vec<CheckStatus>,
    /// Trend checks, reported but not gating.
    pub diagnostics: Vec<CheckStatus>,
    pub warnings: Vec<String>,
    /// Last stage run when a failed certificate stopped the pipeline.
    pub aborted_after: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonitorRow {
    pub lambda: f64,
    pub c0c1_norm: f64,
    /// `λ^δ ‖u^λ‖_{C⁰_t C¹_x}`.
    pub weighted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZvonkinReport {
    pub certificate: String,
    pub time_steps: usize,
    pub forced_lambda: Option<f64>,
    pub lambda_bar: f64,
    pub c0c1_norm: f64,
    pub c_half_t_norm: f64,
    pub residual_linf: f64,
    pub solver_iterations: usize,
    pub scan: Vec<ScanEntry>,
    pub monitor_delta: f64,
    pub monitor: Vec<MonitorRow>,
    pub passed: bool,
}

pub struct ZvonkinStage {
    /// Corrector grid: the coefficient grid refined in time.
    pub grid: Grid,
    pub solution: ZvonkinSolution,
    pub report: ZvonkinReport,
    pub properties: PropertyReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformReport {
    pub certificate: String,
    pub growth_envelope: GrowthEnvelope,
    pub envelope: EnvelopeCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct HolderSummary {
    pub certificate: String,
    pub gamma: f64,
    pub mean: f64,
    pub half_width: f64,
    pub seminorm_mean: f64,
    pub sup_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakResidualSummary {
    pub certificate: String,
    pub max_identity_residual: f64,
    pub finite_fraction: f64,
    pub mean_drift_integral: f64,
    pub max_drift_integral: f64,
    pub max_diffusion_integral: f64,
    /// `K·T`: ceiling of `∫|σ|² dt` under ellipticity.
    pub diffusion_ceiling: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTripSummary {
    pub certificate: String,
    pub paths: usize,
    pub points: usize,
    pub max_error: f64,
    /// States whose image left the box.
    pub out_of_domain: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub certificate: String,
    pub level: usize,
    pub mollification: MollificationCertificate,
    pub lambda_bar: f64,
    pub c0c1_norm: f64,
    pub properties: PropertyReport,
    pub holder: HolderSummary,
    pub weak_residual: WeakResidualSummary,
    pub path_bound: PathBoundCheck,
    pub path_constants: PathConstants,
    pub round_trip: RoundTripSummary,
    pub exit_fraction: f64,
    pub box_warning: bool,
}

pub struct LevelRun {
    pub level: usize,
    pub coefficients: CoefficientSet,
    pub ensemble: PathEnsemble,
    pub holder_per_path: Vec<f64>,
    pub report: LevelReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelPairDistance {
    pub from: usize,
    pub to: usize,
    pub probes: Vec<ProbeDistance>,
    /// Per probe, `W₁` averaged over coordinates.
    pub mean_w1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelPairResidual {
    pub from: usize,
    pub to: usize,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelPairGap {
    pub from: usize,
    pub to: usize,
    pub mean_sup_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossLevelReport {
    pub certificate: String,
    pub levels: Vec<usize>,
    pub uniform_integrability: Vec<UiRow>,
    pub ui_nonincreasing: bool,
    pub probe_times: Vec<f64>,
    pub convergence: Vec<LevelPairDistance>,
    pub w1_decreasing: bool,
    pub drift_residuals: Vec<LevelPairResidual>,
    pub pathwise_gaps: Vec<LevelPairGap>,
    pub gaps_decreasing: bool,
    pub stable_levels: Vec<usize>,
    pub holder_means: Vec<f64>,
    /// `(max − min) / min` of the Hölder means over the stable levels.
    pub moment_variation: f64,
    pub moments_stable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityRow {
    pub center: Vec<f64>,
    pub scale: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub certificate: String,
    pub bins: usize,
    pub bank_version: u32,
    /// `max |mass_i − survivors_i|` over levels and slices.
    pub mass_accounting_error: f64,
    pub mixed_norm: DensityCertificate,
    pub variation_limit: f64,
    pub variation_ok: bool,
    pub fokker_planck_level: usize,
    pub fokker_planck: FpReport,
    pub duality: Option<DualityCertificate>,
    pub weak_continuity: Vec<ContinuityRow>,
}

pub struct DensityStage {
    pub densities: Vec<(usize, EmpiricalDensity)>,
    pub report: DensityReport,
}

pub struct PipelineReport {
    pub summary: Summary,
    pub decomposition: Option<DecompositionCertificate>,
    pub zvonkin: ZvonkinReport,
    pub properties: PropertyReport,
    pub transform: Option<TransformReport>,
    pub levels: Vec<LevelRun>,
    pub cross_level: Option<CrossLevelReport>,
    pub density: Option<DensityStage>,
}

impl PipelineReport {
    pub fn passed(&self) -> bool {
        self.summary.passed
    }

    pub fn level(&self, n: usize) -> Option<&LevelRun> {
        self.levels.iter().find(|l| l.level == n)
    }
}

/// The total drift split at the configured `(p, q)`; `None` when the
/// configuration gives `ε` directly.
pub fn decomposition_stage(v: &ValidatedConfig) -> Result<Option<DecompositionCertificate>> {
    let Some(ex) = v.config.exponents else {
        return Ok(None);
    };
    let split = decompose(&v.coefficients.drift(), ex.p, ex.q, false).stage(stage::DECOMPOSE)?;
    Ok(Some(split.certificate))
}

pub fn corrector_grid(v: &ValidatedConfig) -> Result<Grid> {
    v.grid.with_time_steps(v.config.zvonkin.time_steps)
}

fn corrector_inputs(set: &CoefficientSet, grid: &Grid) -> Result<(SpaceTimeField, SpaceTimeField)> {
    Ok((
        set.diffusion_matrix().resample(grid)?,
        set.b2.resample(grid)?,
    ))
}

fn corrector(
    a: &SpaceTimeField,
    b2: &SpaceTimeField,
    cfg: &ZvonkinConfig,
) -> Result<ZvonkinSolution> {
    match cfg.forced_lambda {
        Some(l) => solve_backward_pde(a, b2, b2, l),
        None => calibrate_lambda(a, b2, cfg.lambda0),
    }
}

/// Corrector for the unmollified `b²`, the `λ^δ` monitor and the property
/// certificate of `Φ`.
pub fn zvonkin_stage(v: &ValidatedConfig) -> Result<ZvonkinStage> {
    let run = || -> Result<ZvonkinStage> {
        let grid = corrector_grid(v)?;
        let (a, b2) = corrector_inputs(&v.coefficients, &grid)?;
        let zc = &v.config.zvonkin;
        let solution = corrector(&a, &b2, zc)?;
        let lambdas: Vec<f64> = MONITOR_FACTORS
            .iter()
            .map(|f| f * solution.lambda_bar)
            .collect();
        let monitor = lambda_delta_monitor(&a, &b2, &lambdas, v.epsilon)?
            .into_iter()
            .map(|(lambda, c0c1_norm, weighted)| MonitorRow {
                lambda,
                c0c1_norm,
                weighted,
            })
            .collect();
        let properties = verify_transform_properties(&solution, &v.config.property_check)?;
        let report = ZvonkinReport {
            certificate: "zvonkin-calibration".into(),
            time_steps: grid.time_steps(),
            forced_lambda: zc.forced_lambda,
            lambda_bar: solution.lambda_bar,
            c0c1_norm: solution.c0c1_norm,
            c_half_t_norm: solution.c_half_t_norm,
            residual_linf: solution.residual_linf,
            solver_iterations: solution.solver_iterations,
            scan: solution.scan.clone(),
            monitor_delta: monitor_delta(v.epsilon),
            monitor,
            passed: solution.c0c1_norm <= CALIBRATION_TARGET,
        };
        Ok(ZvonkinStage {
            grid,
            solution,
            report,
            properties,
        })
    };
    run().stage(stage::ZVONKIN)
}

/// `b̃`, `σ̃` on the corrector grid with the linear-growth certificate.
pub fn transform_stage(v: &ValidatedConfig, z: &ZvonkinStage) -> Result<TransformReport> {
    let run = || -> Result<TransformReport> {
        let c = &v.coefficients;
        let fine = c.with_fields(
            c.b1.resample(&z.grid)?,
            c.b2.resample(&z.grid)?,
            c.sigma.resample(&z.grid)?,
        )?;
        let t = transformed_coefficients(&fine, &z.solution, v.epsilon)?;
        Ok(TransformReport {
            certificate: "transformed-coefficients".into(),
            growth_envelope: growth_envelope_h(&fine, &z.solution, v.epsilon)?,
            envelope: t.envelope_certificate,
        })
    };
    run().stage(stage::TRANSFORM)
}

/// `h_t` on the coefficient grid, the ceiling for every mollified `b¹`.
pub fn base_envelope(v: &ValidatedConfig, z: &ZvonkinStage) -> Result<GrowthEnvelope> {
    growth_envelope_h(&v.coefficients, &z.solution, v.epsilon).stage(stage::TRANSFORM)
}

fn round_trip(sol: &ZvonkinSolution, ens: &PathEnsemble) -> RoundTripSummary {
    let mut max_error = 0.0f64;
    let (mut points, mut out_of_domain, mut paths) = (0usize, 0usize, 0usize);
    for p in ens.kept().take(ROUND_TRIP_PATHS) {
        paths += 1;
        for (i, &t) in ens.times.iter().enumerate() {
            let x = ens.state(p, i);
            points += 1;
            match phi(sol, t, x).and_then(|y| phi_inverse(sol, t, &y)) {
                Ok(back) => {
                    let e = back
                        .iter()
                        .zip(x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    max_error = max_error.max(e);
                }
                Err(_) => out_of_domain += 1,
            }
        }
    }
    RoundTripSummary {
        certificate: "trajectory-round-trip".into(),
        paths,
        points,
        max_error,
        out_of_domain,
        passed: max_error <= ROUND_TRIP_TOLERANCE,
    }
}

/// Mollified coefficients at level `n`, their ensemble under common random
/// numbers, the level corrector and the per-path checks.
pub fn level_stage(
    v: &ValidatedConfig,
    corrector_grid: &Grid,
    h: &[f64],
    n: usize,
) -> Result<LevelRun> {
    let run = || -> Result<LevelRun> {
        let cfg = &v.config;
        let (set, mollification) =
            mollified_sequence(&v.coefficients, n, cfg.mollification.delta0, h, v.epsilon)?;
        let field = FieldCoefficients::from_set(&set);
        let ensemble = euler_maruyama(&field, &cfg.initial_law, &cfg.simulation(), n)?;

        let (a, b2) = corrector_inputs(&set, corrector_grid)?;
        let sol = corrector(&a, &b2, &cfg.zvonkin)?;
        let properties = verify_transform_properties(&sol, &cfg.property_check)?;
        let level_h = growth_envelope_h(&set, &sol, v.epsilon)?;
        let constants = PathConstants {
            lambda_bar: sol.lambda_bar,
            h_l1e: level_h.l1e,
            c_half_t_norm: sol.c_half_t_norm,
            horizon: v.grid.time_horizon(),
            epsilon: v.epsilon,
        };
        let path_bound = path_bound_check(&field, &sol, &ensemble, &constants)?;

        let holder = holder_moment_estimate(&ensemble, constants.gamma())?;
        let weak = weak_solution_residual(&field, &ensemble)?;
        let ceiling = set.ellipticity_k * v.grid.time_horizon();
        let max_diffusion = weak.diffusion_integrals.iter().cloned().fold(0.0, f64::max);
        let weak_residual = WeakResidualSummary {
            certificate: "weak-solution-residual".into(),
            max_identity_residual: weak.max_identity_residual,
            finite_fraction: weak.finite_fraction,
            mean_drift_integral: weak.drift_integrals.iter().sum::<f64>()
                / weak.drift_integrals.len().max(1) as f64,
            max_drift_integral: weak.drift_integrals.iter().cloned().fold(0.0, f64::max),
            max_diffusion_integral: max_diffusion,
            diffusion_ceiling: ceiling,
            passed: weak.max_identity_residual <= IDENTITY_TOLERANCE
                && weak.finite_fraction == 1.0
                && max_diffusion <= ceiling * (1.0 + 1e-12),
        };
        let exit_fraction = ensemble.exit_fraction();
        let report = LevelReport {
            certificate: "level".into(),
            level: n,
            mollification,
            lambda_bar: sol.lambda_bar,
            c0c1_norm: sol.c0c1_norm,
            properties,
            holder: HolderSummary {
                certificate: "holder-moments".into(),
                gamma: holder.gamma,
                mean: holder.mean,
                half_width: holder.half_width,
                seminorm_mean: holder.seminorm_mean,
                sup_mean: holder.sup_mean,
            },
            weak_residual,
            path_bound,
            path_constants: constants,
            round_trip: round_trip(&sol, &ensemble),
            exit_fraction,
            box_warning: exit_fraction > EXIT_WARNING_FRACTION,
        };
        Ok(LevelRun {
            level: n,
            coefficients: set,
            ensemble,
            holder_per_path: holder.per_path,
            report,
        })
    };
    run().stage(stage::SIMULATE)
}

fn relative_variation(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (max - min) / min
}

fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

/// Probe times `T/4`, `T/2`, `T`.
pub fn probe_times(horizon: f64) -> Vec<f64> {
    vec![0.25 * horizon, 0.5 * horizon, horizon]
}

pub fn cross_level_stage(v: &ValidatedConfig, runs: &[LevelRun]) -> Result<CrossLevelReport> {
    let run = || -> Result<CrossLevelReport> {
        let diag = &v.config.diagnostics;
        let ensembles: Vec<&PathEnsemble> = runs.iter().map(|r| &r.ensemble).collect();
        let uniform_integrability = uniform_integrability_diagnostic(&ensembles, &diag.ui_radii)?;
        let ui_nonincreasing = uniform_integrability
            .windows(2)
            .all(|w| w[1].sup_over_levels <= w[0].sup_over_levels);

        let probes = probe_times(v.grid.time_horizon());
        let mut convergence = Vec::new();
        let mut drift_residuals = Vec::new();
        let mut pathwise_gaps = Vec::new();
        for pair in runs.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let distances = convergence_in_law_diagnostic(&a.ensemble, &b.ensemble, &probes)?;
            let mean_w1 = distances
                .iter()
                .map(|p| {
                    p.wasserstein_marginals.iter().sum::<f64>()
                        / p.wasserstein_marginals.len() as f64
                })
                .collect();
            convergence.push(LevelPairDistance {
                from: a.level,
                to: b.level,
                probes: distances,
                mean_w1,
            });
            let r = drift_residual_diagnostic(
                &a.ensemble,
                &a.coefficients,
                &[(b.level, &b.coefficients)],
                diag.drift_radius,
            )?;
            drift_residuals.push(LevelPairResidual {
                from: a.level,
                to: b.level,
                b1: r[0].b1,
                b2: r[0].b2,
            });
            pathwise_gaps.push(LevelPairGap {
                from: a.level,
                to: b.level,
                mean_sup_gap: pathwise_gap(&a.ensemble, &b.ensemble)?,
            });
        }
        let w1_decreasing = (0..probes.len()).all(|j| {
            strictly_decreasing(&convergence.iter().map(|c| c.mean_w1[j]).collect::<Vec<_>>())
        });
        let gaps_decreasing = strictly_decreasing(
            &pathwise_gaps
                .iter()
                .map(|g| g.mean_sup_gap)
                .collect::<Vec<_>>(),
        );

        let holder_means: Vec<f64> = diag
            .stable_levels
            .iter()
            .map(|&n| {
                runs.iter()
                    .find(|r| r.level == n)
                    .map(|r| r.report.holder.mean)
                    .ok_or_else(|| Error::Parameter(format!("stable level {n} was not simulated")))
            })
            .collect::<Result<_>>()?;
        let moment_variation = relative_variation(&holder_means);
        Ok(CrossLevelReport {
            certificate: "cross-level-diagnostics".into(),
            levels: runs.iter().map(|r| r.level).collect(),
            uniform_integrability,
            ui_nonincreasing,
            probe_times: probes,
            convergence,
            w1_decreasing,
            drift_residuals,
            pathwise_gaps,
            gaps_decreasing,
            stable_levels: diag.stable_levels.clone(),
            moments_stable: holder_means.iter().all(|m| m.is_finite())
                && moment_variation < MOMENT_VARIATION_LIMIT,
            holder_means,
            moment_variation,
        })
    };
    run().stage(stage::DIAGNOSTICS)
}

/// Largest gap between a slice's mass and the share of paths still inside
/// the box at that reporting time.
pub fn mass_accounting_error(density: &EmpiricalDensity, ens: &PathEnsemble) -> f64 {
    let every = ens.config.report_every;
    let n = ens.n_paths() as f64;
    (0..density.times.len())
        .map(|i| {
            let alive = ens
                .exit_steps
                .iter()
                .filter(|s| s.is_none_or(|k| k > i * every))
                .count() as f64;
            (density.total_mass(i) - alive / n).abs()
        })
        .fold(0.0, f64::max)
}

/// One simulated level as seen by the density stage.
#[derive(Clone, Copy)]
pub struct LevelView<'a> {
    pub level: usize,
    pub ensemble: &'a PathEnsemble,
    pub coefficients: &'a CoefficientSet,
}

impl LevelRun {
    pub fn view(&self) -> LevelView<'_> {
        LevelView {
            level: self.level,
            ensemble: &self.ensemble,
            coefficients: &self.coefficients,
        }
    }
}

pub fn density_stage(v: &ValidatedConfig, levels: &[LevelView<'_>]) -> Result<DensityStage> {
    let run = || -> Result<DensityStage> {
        let cfg = &v.config;
        let bins = cfg.density.bins;
        let densities: Vec<(usize, EmpiricalDensity)> = levels
            .iter()
            .map(|r| Ok((r.level, empirical_density(r.ensemble, bins, None)?)))
            .collect::<Result<_>>()?;
        let mass_accounting_error = levels
            .iter()
            .zip(&densities)
            .map(|(r, (_, d))| mass_accounting_error(d, r.ensemble))
            .fold(0.0, f64::max);

        let first_moment = cfg.initial_law.first_moment();
        let stable: Vec<(usize, &EmpiricalDensity)> = cfg
            .diagnostics
            .stable_levels
            .iter()
            .filter_map(|&n| {
                densities
                    .iter()
                    .find(|(l, _)| *l == n)
                    .map(|(l, d)| (*l, d))
            })
            .collect();
        let exponents: Vec<(f64, f64)> =
            cfg.density.exponents.iter().map(|e| (e[0], e[1])).collect();
        let mixed_norm =
            density_mixed_norm_check(&stable, &exponents, first_moment, cfg.density.headroom)?;
        let variation_ok = mixed_norm
            .rows
            .iter()
            .all(|r| r.relative_variation < DENSITY_VARIATION_LIMIT);

        let (finest_run, (finest_level, finest)) = levels
            .iter()
            .zip(&densities)
            .next_back()
            .ok_or_else(|| Error::Parameter("no levels simulated".into()))?;
        let bank = test_bank(v.grid.dim());
        let fokker_planck = fokker_planck_residual(
            finest,
            &FieldCoefficients::from_set(finest_run.coefficients),
            &bank,
        )?;
        let duality = match cfg.exponents {
            Some(ex) => Some(duality_check(
                &v.coefficients.b2,
                finest,
                ex.p,
                ex.q,
                first_moment,
            )?),
            None => None,
        };
        let weak_continuity = bank
            .iter()
            .filter(|phi| {
                phi.center
                    .iter()
                    .all(|c| c.abs() + phi.scale < finest.half_width)
            })
            .map(|phi| ContinuityRow {
                center: phi.center.clone(),
                scale: phi.scale,
                value: weak_continuity(finest, phi),
            })
            .collect();
        let report = DensityReport {
            certificate: "density".into(),
            bins,
            bank_version: TEST_BANK_VERSION,
            mass_accounting_error,
            mixed_norm,
            variation_limit: DENSITY_VARIATION_LIMIT,
            variation_ok,
            fokker_planck_level: *finest_level,
            fokker_planck,
            duality,
            weak_continuity,
        };
        Ok(DensityStage { densities, report })
    };
    run().stage(stage::DENSITY)
}

fn certificate_statuses(r: &PipelineReport) -> (Vec<CheckStatus>, Vec<CheckStatus>) {
    let mut certs = Vec::new();
    let mut diags = Vec::new();
    if let Some(d) = &r.decomposition {
        certs.push(status("decomposition", d.passed));
    }
    certs.push(status("zvonkin-calibration", r.zvonkin.passed));
    certs.push(status("transform-properties", r.properties.passed));
    if let Some(t) = &r.transform {
        certs.push(status("transformed-coefficients", t.envelope.passed));
    }
    for l in &r.levels {
        let rep = &l.report;
        let n = l.level;
        certs.push(status(
            format!("mollified-sequence[{n}]"),
            rep.mollification.passed,
        ));
        certs.push(status(
            format!("transform-properties[{n}]"),
            rep.properties.passed,
        ));
        certs.push(status(
            format!("weak-solution-residual[{n}]"),
            rep.weak_residual.passed,
        ));
        certs.push(status(
            format!("x-path-bound[{n}]"),
            rep.path_bound.fraction_within >= PATH_BOUND_FRACTION,
        ));
        diags.push(status(
            format!("trajectory-round-trip[{n}]"),
            rep.round_trip.passed,
        ));
    }
    if let Some(c) = &r.cross_level {
        diags.push(status("uniform-integrability", c.ui_nonincreasing));
        diags.push(status("convergence-in-law", c.w1_decreasing));
        diags.push(status("pathwise-gap", c.gaps_decreasing));
        diags.push(status("holder-moments", c.moments_stable));
    }
    if let Some(d) = &r.density {
        certs.push(status("density-mixed-norm", d.report.mixed_norm.passed));
        certs.push(status(
            "mass-accounting",
            d.report.mass_accounting_error <= 1e-12,
        ));
        if let Some(du) = &d.report.duality {
            certs.push(status("duality-pairing", du.passed));
        }
        diags.push(status("density-variation", d.report.variation_ok));
    }
    (certs, diags)
}

fn note(opts: &PipelineOptions, start: Instant, msg: &str) {
    if opts.verbose {
        eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
    }
}

/// Runs every stage in order. A failed transform-property certificate stops
/// the run before the transform, since every later bound relies on it.
pub fn run_pipeline(v: &ValidatedConfig, opts: &PipelineOptions) -> Result<PipelineReport> {
    let start = Instant::now();
    let started = unix_seconds();
    let mut timings: Vec<(&'static str, f64)> = Vec::new();
    let mut lap = Instant::now();
    let mut mark = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        timings.push((name, lap.elapsed().as_secs_f64()));
        lap = Instant::now();
    };

    note(opts, start, "decomposition");
    let decomposition = decomposition_stage(v)?;
    mark(stage::DECOMPOSE, &mut timings);
    note(opts, start, "corrector calibration");
    let z = zvonkin_stage(v)?;
    mark(stage::ZVONKIN, &mut timings);

    let mut report = PipelineReport {
        summary: Summary {
            certificate: "summary".into(),
            name: v.config.name.clone(),
            master_seed: v.config.master_seed,
            certificates: Vec::new(),
            diagnostics: Vec::new(),
            warnings: Vec::new(),
            aborted_after: None,
            passed: false,
        },
        decomposition,
        zvonkin: z.report.clone(),
        properties: z.properties.clone(),
        transform: None,
        levels: Vec::new(),
        cross_level: None,
        density: None,
    };

    if !z.properties.passed {
        report.summary.aborted_after = Some(stage::ZVONKIN.into());
    } else {
        note(opts, start, "transformed coefficients");
        report.transform = Some(transform_stage(v, &z)?);
        let h = base_envelope(v, &z)?;
        mark(stage::TRANSFORM, &mut timings);
        for &n in &v.config.mollification.levels {
            note(opts, start, &format!("level {n}"));
            report.levels.push(level_stage(v, &z.grid, &h.h, n)?);
        }
        mark(stage::SIMULATE, &mut timings);
        note(opts, start, "cross-level diagnostics");
        report.cross_level = Some(cross_level_stage(v, &report.levels)?);
        mark(stage::DIAGNOSTICS, &mut timings);
        note(opts, start, "densities");
        let views: Vec<LevelView<'_>> = report.levels.iter().map(LevelRun::view).collect();
        report.density = Some(density_stage(v, &views)?);
        mark(stage::DENSITY, &mut timings);
    }

    let (certificates, diagnostics) = certificate_statuses(&report);
    let mut warnings = Vec::new();
    for l in &report.levels {
        if l.report.box_warning {
            warnings.push(format!(
                "level {}: exit fraction {} exceeds {EXIT_WARNING_FRACTION}; enlarge the box",
                l.level, l.report.exit_fraction
            ));
        }
    }
    report.summary.passed = certificates.iter().all(|c| c.passed);
    report.summary.certificates = certificates;
    report.summary.diagnostics = diagnostics;
    report.summary.warnings = warnings;

    if let Some(dir) = &opts.output_dir {
        note(opts, start, "writing reports");
        write_reports(v, &report, dir, opts.write_ensembles).stage(stage::REPORT)?;
        mark(stage::REPORT, &mut timings);
        write_metadata(dir, started, &timings).stage(stage::REPORT)?;
    }
    note(opts, start, "done");
    Ok(report)
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    certificate: &'static str,
    version: &'static str,
    started_unix: f64,
    finished_unix: f64,
    stage_seconds: Vec<(&'a str, f64)>,
}

fn write_metadata(dir: &Path, started: f64, timings: &[(&'static str, f64)]) -> Result<()> {
    write_json(
        dir,
        "metadata.json",
        &Metadata {
            certificate: "run-metadata",
            version: env!("CARGO_PKG_VERSION"),
            started_unix: started,
            finished_unix: unix_seconds(),
            stage_seconds: timings.to_vec(),
        },
    )
}

/// Writes one JSON file per stage and CSV tables for plotting.
pub fn write_reports(
    v: &ValidatedConfig,
    r: &PipelineReport,
    dir: &Path,
    write_ensembles: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), v.config.to_toml())?;
    if let Some(d) = &r.decomposition {
        write_json(dir, "decomposition.json", d)?;
    }
    write_json(dir, "zvonkin.json", &r.zvonkin)?;
    write_json(dir, "transform_properties.json", &r.properties)?;
    if let Some(t) = &r.transform {
        write_json(dir, "transform.json", t)?;
    }
    for l in &r.levels {
        write_level(dir, l, write_ensembles)?;
    }
    if let Some(c) = &r.cross_level {
        write_cross_level(dir, c)?;
    }
    if let Some(d) = &r.density {
        write_density(dir, d)?;
    }
    write_json(dir, "summary.json", &r.summary)
}

pub fn write_level(dir: &Path, l: &LevelRun, write_ensemble: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(dir, &format!("level_{}.json", l.level), &l.report)?;
    let rows: Vec<String> = l
        .ensemble
        .kept()
        .zip(&l.holder_per_path)
        .map(|(p, h)| format!("{p},{h}"))
        .collect();
    write_csv(
        dir,
        &format!("holder_level_{}.csv", l.level),
        "path,holder_norm",
        &rows,
    )?;
    if write_ensemble {
        io::write_ensemble(
            &l.ensemble,
            &dir.join(format!("ensemble_level_{}.bin", l.level)),
        )?;
    }
    Ok(())
}

pub fn write_cross_level(dir: &Path, c: &CrossLevelReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(dir, "cross_level.json", c)?;
    let levels = c
        .levels
        .iter()
        .map(|n| format!("level_{n}"))
        .collect::<Vec<_>>()
        .join(",");
    let ui: Vec<String> = c
        .uniform_integrability
        .iter()
        .map(|row| {
            let vals: Vec<String> = row.per_level.iter().map(|x| x.to_string()).collect();
            format!("{},{},{}", row.radius, vals.join(","), row.sup_over_levels)
        })
        .collect();
    write_csv(
        dir,
        "uniform_integrability.csv",
        &format!("radius,{levels},sup"),
        &ui,
    )?;
    let mut conv = Vec::new();
    for pair in &c.convergence {
        for (p, w) in pair.probes.iter().zip(&pair.mean_w1) {
            conv.push(format!(
                "{},{},{},{},{}",
                pair.from, pair.to, p.time, w, p.energy
            ));
        }
    }
    write_csv(dir, "convergence.csv", "from,to,time,mean_w1,energy", &conv)
}

pub fn write_density(dir: &Path, d: &DensityStage) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(dir, "density.json", &d.report)?;
    for (n, dens) in &d.densities {
        let f = fs::File::create(dir.join(format!("density_level_{n}.csv")))?;
        io::write_density_csv(dens, BufWriter::new(f))?;
    }
    Ok(())
}
