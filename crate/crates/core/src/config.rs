//! Experiment configuration: TOML schema, preset overlay and validation.
//!
//! A file may name a `preset`; its remaining tables replace the preset's
//! values key by key, except that a table whose `kind` tag changes replaces
//! the preset's table outright. Unknown keys are rejected after merging.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, ModulusDescriptor};
use crate::decomposition::{critical_epsilon, decompose};
use crate::density::check_density_exponents;
use crate::error::Error;
use crate::grid::{Grid, SpaceTimeField};
use crate::io::read_field_binary;
use crate::norms;
use crate::presets;
use crate::simulation::{InitialLaw, SimulationConfig};
use crate::zvonkin::PropertyCheck;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
    pub time_horizon: f64,
    pub time_steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> crate::Result<Grid> {
        Grid::new(
            self.dim,
            self.half_width,
            self.points_per_axis,
            self.time_horizon,
            self.time_steps,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSource {
    Preset {
        name: String,
    },
    /// Binary field dumps. Either `b1` and `b2`, or a total `drift` that is
    /// split at the configured exponents.
    Files {
        b1: Option<PathBuf>,
        b2: Option<PathBuf>,
        drift: Option<PathBuf>,
        sigma: PathBuf,
        ellipticity_k: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exponents {
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZvonkinConfig {
    /// Time steps of the corrector grid; coefficients are resampled onto it.
    pub time_steps: usize,
    pub lambda0: f64,
    /// Skips calibration and solves at this `λ`.
    pub forced_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollificationConfig {
    pub delta0: f64,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub report_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub bins: usize,
    /// `(p̃, q̃)` pairs.
    pub exponents: Vec<[f64; 2]>,
    /// Factor on the reference-level norm defining the empirical constant.
    pub headroom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Levels over which moments and density norms must be stable; the
    /// first is the reference level.
    pub stable_levels: Vec<usize>,
    pub ui_radii: Vec<f64>,
    pub drift_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub coefficients: CoefficientSource,
    pub exponents: Option<Exponents>,
    /// Used only when `exponents` is absent.
    pub epsilon: Option<f64>,
    pub zvonkin: ZvonkinConfig,
    pub property_check: PropertyCheck,
    pub initial_law: InitialLaw,
    pub mollification: MollificationConfig,
    pub monte_carlo: MonteCarloConfig,
    pub density: DensityConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            n_paths: self.monte_carlo.n_paths,
            dt: self.monte_carlo.dt,
            horizon: self.grid.time_horizon,
            report_every: self.monte_carlo.report_every,
            master_seed: self.master_seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Stable identifiers of validation failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfigErrorCode {
    /// Unparseable TOML, unknown key or unknown preset.
    Parse,
    Grid,
    /// `(p, q)` outside `p, q > 1`, `1/q + d/p < 1`.
    Exponents,
    Epsilon,
    Ellipticity,
    /// Non-finite coefficients or infinite linear-growth envelope.
    Envelope,
    CoefficientFiles,
    InitialLaw,
    MonteCarlo,
    Mollification,
    DensityExponents,
    Zvonkin,
    Diagnostics,
}

impl ConfigErrorCode {
    pub fn code(self) -> &'static str {
        match self {
            Self::Parse => "C01",
            Self::Grid => "C02",
            Self::Exponents => "C03",
            Self::Epsilon => "C04",
            Self::Ellipticity => "C05",
            Self::Envelope => "C06",
            Self::CoefficientFiles => "C07",
            Self::InitialLaw => "C08",
            Self::MonteCarlo => "C09",
            Self::Mollification => "C10",
            Self::DensityExponents => "C11",
            Self::Zvonkin => "C12",
            Self::Diagnostics => "C13",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigError {
    pub code: ConfigErrorCode,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:?}: {}",
            self.code.code(),
            self.code,
            self.message
        )
    }
}

fn err(code: ConfigErrorCode, message: impl Into<String>) -> ConfigError {
    ConfigError {
        code,
        message: message.into(),
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot)
                        if slot.is_table()
                            && v.is_table()
                            && slot.get("kind") == v.get("kind").or(slot.get("kind")) =>
                    {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a TOML document, overlaying it on a preset when `preset` is set.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| err(ConfigErrorCode::Parse, format!("{e}")))?;
    let value = match doc.remove("preset") {
        Some(toml::Value::String(name)) => {
            let preset = presets::preset_config(&name)
                .map_err(|e| err(ConfigErrorCode::Parse, e.to_string()))?;
            let mut base = toml::Value::try_from(&preset)
                .map_err(|e| err(ConfigErrorCode::Parse, e.to_string()))?;
            merge(&mut base, toml::Value::Table(doc));
            base
        }
        Some(_) => return Err(err(ConfigErrorCode::Parse, "preset must be a string")),
        None => toml::Value::Table(doc),
    };
    value
        .try_into()
        .map_err(|e: toml::de::Error| err(ConfigErrorCode::Parse, e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| err(ConfigErrorCode::Parse, format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// A configuration whose admissibility checks all passed.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    pub grid: Grid,
    pub coefficients: CoefficientSet,
    pub epsilon: f64,
}

fn load_coefficients(
    config: &ExperimentConfig,
    grid: Grid,
    errors: &mut Vec<ConfigError>,
) -> Option<CoefficientSet> {
    use ConfigErrorCode as C;
    match &config.coefficients {
        CoefficientSource::Preset { name } => match presets::preset_coefficients(name, grid) {
            Ok(c) => Some(c),
            Err(Error::Ellipticity {
                time_index,
                node,
                detail,
            }) => {
                errors.push(err(
                    C::Ellipticity,
                    format!("time index {time_index}, node {node}: {detail}"),
                ));
                None
            }
            Err(e) => {
                errors.push(err(C::Parse, e.to_string()));
                None
            }
        },
        CoefficientSource::Files {
            b1,
            b2,
            drift,
            sigma,
            ellipticity_k,
        } => {
            let read = |p: &PathBuf, errors: &mut Vec<ConfigError>| match read_field_binary(p) {
                Ok(f) if f.grid() == &grid => Some(f),
                Ok(_) => {
                    errors.push(err(
                        C::CoefficientFiles,
                        format!("{}: grid differs from [grid]", p.display()),
                    ));
                    None
                }
                Err(e) => {
                    errors.push(err(C::CoefficientFiles, format!("{}: {e}", p.display())));
                    None
                }
            };
            let sigma = read(sigma, errors)?;
            let (b1, b2) = match (b1, b2, drift) {
                (Some(a), Some(b), None) => (read(a, errors)?, read(b, errors)?),
                (None, None, Some(d)) => {
                    let total = read(d, errors)?;
                    let Some(ex) = config.exponents else {
                        errors.push(err(
                            C::Exponents,
                            "a total drift needs [exponents] to be split",
                        ));
                        return None;
                    };
                    match decompose(&total, ex.p, ex.q, false) {
                        Ok(split) => (split.f_le, split.f_gt),
                        Err(e) => {
                            errors.push(err(C::Exponents, e.to_string()));
                            return None;
                        }
                    }
                }
                _ => {
                    errors.push(err(C::CoefficientFiles, "give either b1 and b2, or drift"));
                    return None;
                }
            };
            match CoefficientSet::new(
                b1,
                b2,
                sigma,
                *ellipticity_k,
                ModulusDescriptor::Unspecified,
            ) {
                Ok(c) => Some(c),
                Err(Error::Ellipticity {
                    time_index,
                    node,
                    detail,
                }) => {
                    errors.push(err(
                        C::Ellipticity,
                        format!("time index {time_index}, node {node}: {detail}"),
                    ));
                    None
                }
                Err(e) => {
                    errors.push(err(C::CoefficientFiles, e.to_string()));
                    None
                }
            }
        }
    }
}

fn field_finite(f: &SpaceTimeField) -> bool {
    f.values().iter().all(|v| v.is_finite())
}

/// Runs every admissibility check and reports all failures together.
pub fn validate(config: &ExperimentConfig) -> Result<ValidatedConfig, Vec<ConfigError>> {
    use ConfigErrorCode as C;
    let mut errors = Vec::new();
    let grid = match config.grid.build() {
        Ok(g) => Some(g),
        Err(e) => {
            errors.push(err(C::Grid, e.to_string()));
            None
        }
    };
    let d = config.grid.dim;

    let epsilon = match (config.exponents, config.epsilon) {
        (Some(ex), _) => {
            if !(ex.p > 1.0 && ex.q > 1.0 && 1.0 / ex.q + d as f64 / ex.p < 1.0) {
                errors.push(err(
                    C::Exponents,
                    format!(
                        "(p, q) = ({}, {}) needs p, q > 1 and 1/q + {d}/p < 1 strictly",
                        ex.p, ex.q
                    ),
                ));
                None
            } else {
                match critical_epsilon(ex.p, ex.q, d) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        errors.push(err(C::Exponents, e.to_string()));
                        None
                    }
                }
            }
        }
        (None, Some(e)) if e > 0.0 && e.is_finite() => Some(e),
        (None, other) => {
            errors.push(err(
                C::Epsilon,
                format!("need [exponents] or a positive epsilon, got {other:?}"),
            ));
            None
        }
    };
    if let Some(e) = epsilon {
        if e / (1.0 + e) > 0.5 {
            errors.push(err(
                C::Epsilon,
                format!("epsilon {e} gives a Hölder exponent above 1/2"),
            ));
        }
    }

    if let Some(g) = grid {
        if let Err(e) = config.initial_law.validate(&g) {
            errors.push(err(C::InitialLaw, e.to_string()));
        }
        if config.zvonkin.time_steps < 2
            || !(config.zvonkin.time_steps - 1).is_multiple_of(g.time_steps() - 1)
        {
            errors.push(err(
                C::Zvonkin,
                format!(
                    "corrector time steps {} must refine the coefficient grid ({} steps)",
                    config.zvonkin.time_steps,
                    g.time_steps()
                ),
            ));
        }
        for &n in &config.mollification.levels {
            let delta = crate::simulation::level_scale(config.mollification.delta0, n);
            if !(delta > 0.0 && delta <= g.half_width()) {
                errors.push(err(
                    C::Mollification,
                    format!("level {n}: scale {delta} outside (0, L]"),
                ));
            }
        }
    }
    if !(config.zvonkin.lambda0 > 0.0) || config.zvonkin.forced_lambda.is_some_and(|l| !(l > 0.0)) {
        errors.push(err(C::Zvonkin, "lambda values must be positive"));
    }
    let mut sorted = config.mollification.levels.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 || sorted != config.mollification.levels {
        errors.push(err(
            C::Mollification,
            "need at least two distinct increasing levels",
        ));
    }
    if let Err(e) = config.simulation().steps() {
        errors.push(err(C::MonteCarlo, e.to_string()));
    }
    for &[p, q] in &config.density.exponents {
        if let Err(e) = check_density_exponents(p, q, d) {
            errors.push(err(C::DensityExponents, e.to_string()));
        }
    }
    if config.density.bins == 0 || !(config.density.headroom >= 1.0) {
        errors.push(err(
            C::DensityExponents,
            "bins must be positive and headroom at least 1",
        ));
    }
    let diag = &config.diagnostics;
    if diag.stable_levels.is_empty()
        || diag
            .stable_levels
            .iter()
            .any(|l| !config.mollification.levels.contains(l))
    {
        errors.push(err(
            C::Diagnostics,
            "stable levels must be a nonempty subset of the mollification levels",
        ));
    }
    if diag.ui_radii.len() < 3
        || diag.ui_radii.windows(2).any(|w| w[1] <= w[0])
        || !(diag.drift_radius > 0.0)
    {
        errors.push(err(
            C::Diagnostics,
            "need at least three increasing radii and a positive cutoff radius",
        ));
    }

    let coefficients = grid.and_then(|g| load_coefficients(config, g, &mut errors));
    if let Some(c) = &coefficients {
        if !(field_finite(&c.b1) && field_finite(&c.b2) && field_finite(&c.sigma)) {
            errors.push(err(C::Envelope, "coefficients contain non-finite values"));
        } else {
            let g = c.b1.grid();
            let env = (0..g.time_steps())
                .map(|k| norms::linear_growth_envelope(g, c.b1.slice(k), g.dim()))
                .fold(0.0, f64::max);
            if !env.is_finite() {
                errors.push(err(
                    C::Envelope,
                    "b1 has an infinite linear-growth envelope",
                ));
            }
        }
    }

    match (errors.is_empty(), grid, coefficients, epsilon) {
        (true, Some(grid), Some(coefficients), Some(epsilon)) => Ok(ValidatedConfig {
            config: config.clone(),
            grid,
            coefficients,
            epsilon,
        }),
        _ => Err(errors),
    }
}
