//! Drift and diffusion data `b = b¹ + b²`, `σ` sampled on a common grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::norms;

/// Declared modulus of continuity of `σ` in space; metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModulusDescriptor {
    Lipschitz { constant: f64 },
    Holder { constant: f64, exponent: f64 },
    Unspecified,
}

#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub b1: SpaceTimeField,
    pub b2: SpaceTimeField,
    /// Row-major `d × d` matrix per node.
    pub sigma: SpaceTimeField,
    pub ellipticity_k: f64,
    pub modulus: ModulusDescriptor,
}

impl CoefficientSet {
    /// Assembles a coefficient set and runs the ellipticity check.
    pub fn new(
        b1: SpaceTimeField,
        b2: SpaceTimeField,
        sigma: SpaceTimeField,
        ellipticity_k: f64,
        modulus: ModulusDescriptor,
    ) -> Result<Self> {
        let d = b1.grid().dim();
        if b1.codim() != d || b2.codim() != d || sigma.codim() != d * d {
            return Err(Error::Parameter(format!(
                "coefficient codimensions ({}, {}, {}) do not match d = {d}",
                b1.codim(),
                b2.codim(),
                sigma.codim()
            )));
        }
        b1.check_compatible(&b2)?;
        if sigma.grid() != b1.grid() {
            return Err(Error::Parameter("sigma lives on a different grid".into()));
        }
        if !(ellipticity_k.is_finite() && ellipticity_k >= 1.0) {
            return Err(Error::Parameter(format!(
                "ellipticity constant {ellipticity_k} must be >= 1"
            )));
        }
        let set = Self {
            b1,
            b2,
            sigma,
            ellipticity_k,
            modulus,
        };
        set.check_ellipticity()?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.b1.grid().dim()
    }

    /// Full drift `b¹ + b²`.
    pub fn drift(&self) -> SpaceTimeField {
        self.b1
            .linear_combination(1.0, &self.b2, 1.0)
            .expect("compatible by construction")
    }

    /// Verifies `K⁻¹|ξ|² ≤ |σ*ξ|² ≤ K|ξ|²` for every `ξ` at every node.
    ///
    /// Checking the extreme singular values covers all probe directions at once.
    pub fn check_ellipticity(&self) -> Result<()> {
        check_ellipticity(&self.sigma, self.ellipticity_k)
    }

    /// `a = σσ*` as a field of row-major `d × d` matrices.
    pub fn diffusion_matrix(&self) -> SpaceTimeField {
        diffusion_matrix(&self.sigma)
    }

    /// Returns a copy with the given fields replaced.
    pub fn with_fields(
        &self,
        b1: SpaceTimeField,
        b2: SpaceTimeField,
        sigma: SpaceTimeField,
    ) -> Result<Self> {
        Self::new(b1, b2, sigma, self.ellipticity_k, self.modulus)
    }
}

pub fn check_ellipticity(sigma: &SpaceTimeField, k: f64) -> Result<()> {
    let grid = sigma.grid();
    let d = grid.dim();
    let tol = 1e-12;
    for t in 0..grid.time_steps() {
        for node in 0..grid.node_count() {
            let s = sigma.node_value(t, node);
            let smin = norms::min_singular_value(s, d);
            let smax = norms::spectral_norm(s, d, d);
            if smin * smin < 1.0 / k - tol {
                return Err(Error::Ellipticity {
                    time_index: t,
                    node,
                    detail: format!(
                        "smallest singular value {smin:e} below K^(-1/2) = {:e}",
                        k.powf(-0.5)
                    ),
                });
            }
            if smax * smax > k + tol {
                return Err(Error::Ellipticity {
                    time_index: t,
                    node,
                    detail: format!(
                        "largest singular value {smax:e} above K^(1/2) = {:e}",
                        k.sqrt()
                    ),
                });
            }
        }
    }
    Ok(())
}

pub fn diffusion_matrix(sigma: &SpaceTimeField) -> SpaceTimeField {
    let grid = *sigma.grid();
    let d = grid.dim();
    let mut values = Vec::with_capacity(sigma.values().len());
    for s in sigma.values().chunks(d * d) {
        for i in 0..d {
            for j in 0..d {
                values.push((0..d).map(|k| s[i * d + k] * s[j * d + k]).sum());
            }
        }
    }
    SpaceTimeField::new(grid, d * d, values).expect("products of finite values")
}

/// Row-major identity scaled by `s`.
pub fn scaled_identity(d: usize, s: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = s;
    }
    m
}
