//! Named experiment presets and their coefficient builders.

use crate::coefficients::{scaled_identity, CoefficientSet, ModulusDescriptor};
use crate::config::{
    CoefficientSource, DensityConfig, DiagnosticsConfig, ExperimentConfig, Exponents, GridConfig,
    MollificationConfig, MonteCarloConfig, ZvonkinConfig,
};
use crate::error::{Error, Result};
use crate::grid::{norm2, Grid, SpaceTimeField};
use crate::simulation::InitialLaw;
use crate::zvonkin::PropertyCheck;

pub const PRESET_NAMES: [&str; 3] = ["brownian", "powerlaw-singular", "negative-control"];

/// Power-law drift `b²(x) = c x / max(|x|, h)^{1+α}` plus `b¹ = −ρ₀(1+t) x`
/// and `σ = (1 + a sin x₁ cos x₂) I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub strength: f64,
    pub alpha: f64,
    pub rho0: f64,
    pub sigma_amplitude: f64,
    pub ellipticity_k: f64,
}

pub const POWERLAW: PowerLaw = PowerLaw {
    strength: -1.0,
    alpha: 0.5,
    rho0: 0.5,
    sigma_amplitude: 0.25,
    ellipticity_k: 2.0,
};

pub const NEGATIVE_CONTROL: PowerLaw = PowerLaw {
    strength: -6.0,
    alpha: 0.5,
    rho0: 0.5,
    sigma_amplitude: 0.25,
    ellipticity_k: 2.0,
};

pub fn powerlaw_coefficients(grid: Grid, law: &PowerLaw) -> Result<CoefficientSet> {
    let d = grid.dim();
    let h = grid.spacing();
    let b1 = SpaceTimeField::from_fn(grid, d, |t, x, o| {
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = -law.rho0 * (1.0 + t) * xi;
        }
    })?;
    let b2 = SpaceTimeField::from_fn(grid, d, |_, x, o| {
        let r = norm2(x).max(h);
        let scale = law.strength / r.powf(1.0 + law.alpha);
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = scale * xi;
        }
    })?;
    let sigma = SpaceTimeField::from_fn(grid, d * d, |_, x, o| {
        let mut s = 1.0;
        if d >= 2 {
            s += law.sigma_amplitude * x[0].sin() * x[1].cos();
        } else {
            s += law.sigma_amplitude * x[0].sin();
        }
        o.copy_from_slice(&scaled_identity(d, s));
    })?;
    CoefficientSet::new(
        b1,
        b2,
        sigma,
        law.ellipticity_k,
        ModulusDescriptor::Lipschitz {
            constant: law.sigma_amplitude * 2f64.sqrt(),
        },
    )
}

/// `b = 0`, `σ = I`.
pub fn brownian_coefficients(grid: Grid) -> Result<CoefficientSet> {
    let d = grid.dim();
    CoefficientSet::new(
        SpaceTimeField::zeros(grid, d),
        SpaceTimeField::zeros(grid, d),
        SpaceTimeField::constant(grid, &scaled_identity(d, 1.0)),
        1.0,
        ModulusDescriptor::Lipschitz { constant: 0.0 },
    )
}

/// Builds the coefficients of a named preset on `grid`.
pub fn preset_coefficients(name: &str, grid: Grid) -> Result<CoefficientSet> {
    match name {
        "brownian" => brownian_coefficients(grid),
        "powerlaw-singular" => powerlaw_coefficients(grid, &POWERLAW),
        "negative-control" => powerlaw_coefficients(grid, &NEGATIVE_CONTROL),
        other => Err(Error::Parameter(format!("unknown preset {other:?}"))),
    }
}

const DENSITY_EXPONENTS: [[f64; 2]; 3] = [[1.2, 1.5], [1.1, 3.0], [1.5, 1.2]];

pub fn preset_config(name: &str) -> Result<ExperimentConfig> {
    let source = CoefficientSource::Preset {
        name: name.to_string(),
    };
    match name {
        "brownian" => Ok(ExperimentConfig {
            name: name.into(),
            master_seed: 20_240_601,
            output_dir: "out/brownian".into(),
            grid: GridConfig {
                dim: 1,
                half_width: 8.0,
                points_per_axis: 129,
                time_horizon: 1.0,
                time_steps: 2,
            },
            coefficients: source,
            exponents: Some(Exponents { p: 4.0, q: 4.0 }),
            epsilon: None,
            zvonkin: ZvonkinConfig {
                time_steps: 11,
                lambda0: 1.0,
                forced_lambda: None,
            },
            property_check: PropertyCheck::default(),
            initial_law: InitialLaw::PointMass { point: vec![0.0] },
            mollification: MollificationConfig {
                delta0: 1.0,
                levels: vec![0, 1],
            },
            monte_carlo: MonteCarloConfig {
                n_paths: 10_000,
                dt: 1e-3,
                report_every: 10,
            },
            density: DensityConfig {
                bins: 64,
                exponents: DENSITY_EXPONENTS.to_vec(),
                headroom: 1.15,
            },
            diagnostics: DiagnosticsConfig {
                stable_levels: vec![0, 1],
                ui_radii: vec![1.0, 2.0, 3.0, 4.0],
                drift_radius: 2.0,
            },
        }),
        "powerlaw-singular" => Ok(ExperimentConfig {
            name: name.into(),
            master_seed: 20_240_602,
            output_dir: "out/powerlaw-singular".into(),
            grid: GridConfig {
                dim: 2,
                half_width: 4.0,
                points_per_axis: 129,
                time_horizon: 1.0,
                time_steps: 5,
            },
            coefficients: source,
            exponents: Some(Exponents {
                p: 10.0 / 3.0,
                q: 6.0,
            }),
            epsilon: None,
            zvonkin: ZvonkinConfig {
                time_steps: 21,
                lambda0: 1.0,
                forced_lambda: None,
            },
            property_check: PropertyCheck::default(),
            initial_law: InitialLaw::Gaussian {
                mean: vec![0.0, 0.0],
                std: 0.5,
            },
            mollification: MollificationConfig {
                delta0: 8.0,
                levels: vec![2, 3, 4, 5, 6],
            },
            monte_carlo: MonteCarloConfig {
                n_paths: 10_000,
                dt: 1e-3,
                report_every: 10,
            },
            density: DensityConfig {
                bins: 32,
                exponents: DENSITY_EXPONENTS.to_vec(),
                headroom: 1.15,
            },
            diagnostics: DiagnosticsConfig {
                stable_levels: vec![3, 4, 5, 6],
                ui_radii: vec![0.5, 1.0, 1.5, 2.0, 3.0],
                drift_radius: 1.0,
            },
        }),
        "negative-control" => Ok(ExperimentConfig {
            name: name.into(),
            master_seed: 20_240_603,
            output_dir: "out/negative-control".into(),
            grid: GridConfig {
                dim: 2,
                half_width: 4.0,
                points_per_axis: 65,
                time_horizon: 1.0,
                time_steps: 5,
            },
            coefficients: source,
            exponents: Some(Exponents {
                p: 10.0 / 3.0,
                q: 6.0,
            }),
            epsilon: None,
            zvonkin: ZvonkinConfig {
                time_steps: 21,
                lambda0: 1.0,
                forced_lambda: Some(0.05),
            },
            property_check: PropertyCheck {
                pairs: 2_000,
                ..PropertyCheck::default()
            },
            initial_law: InitialLaw::Gaussian {
                mean: vec![0.0, 0.0],
                std: 0.5,
            },
            mollification: MollificationConfig {
                delta0: 8.0,
                levels: vec![2, 3],
            },
            monte_carlo: MonteCarloConfig {
                n_paths: 1_000,
                dt: 1e-3,
                report_every: 10,
            },
            density: DensityConfig {
                bins: 16,
                exponents: DENSITY_EXPONENTS.to_vec(),
                headroom: 1.15,
            },
            diagnostics: DiagnosticsConfig {
                stable_levels: vec![2, 3],
                ui_radii: vec![0.5, 1.0, 2.0],
                drift_radius: 1.0,
            },
        }),
        other => Err(Error::Parameter(format!(
            "unknown preset {other:?}; known: {PRESET_NAMES:?}"
        ))),
    }
}
