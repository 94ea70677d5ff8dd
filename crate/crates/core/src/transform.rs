//! Coefficients of the transformed process `Y = Φ(X)` and the explicit
//! pathwise bounds built from them.
//!
//! With `J = ∇u` (row-major `∂_j u^i`) the transformed drift and diffusion are
//! `b̃ = (λ̄u + (I + J) b¹) ∘ Φ⁻¹` and `σ̃ = ((I + J) σ) ∘ Φ⁻¹`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::{norm2, SpaceTimeField, MAX_DIM};
use crate::norms;
use crate::zvonkin::{self, ZvonkinSolution};

/// Relative slack in the envelope certificates.
pub const ENVELOPE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceEnvelope {
    pub time: f64,
    pub envelope_b_tilde: f64,
    pub h: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeCertificate {
    pub certificate: String,
    pub lambda_bar: f64,
    pub h_l1: f64,
    pub h_l1e: f64,
    pub sigma_sup: f64,
    pub sigma_tilde_sup: f64,
    pub sigma_margin: f64,
    pub slices: Vec<SliceEnvelope>,
    /// Nodes excluded because `Φ⁻¹` left the box there.
    pub flagged_nodes: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct TransformedCoefficients {
    pub b_tilde: SpaceTimeField,
    pub sigma_tilde: SpaceTimeField,
    pub h: Vec<f64>,
    /// `flagged[k * nodes + node]` marks nodes whose preimage left the box.
    pub flagged: Vec<bool>,
    pub envelope_certificate: EnvelopeCertificate,
}

/// `h_t = λ̄ + 4‖b¹_t/(1+|x|)‖_∞` with its `L¹` and `L^{1+ε}` norms in time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthEnvelope {
    pub h: Vec<f64>,
    pub l1: f64,
    pub l1e: f64,
}

pub fn growth_envelope_h(
    coeffs: &CoefficientSet,
    sol: &ZvonkinSolution,
    epsilon: f64,
) -> Result<GrowthEnvelope> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Parameter(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    let grid = coeffs.b1.grid();
    let d = grid.dim();
    let h: Vec<f64> = (0..grid.time_steps())
        .map(|k| sol.lambda_bar + 4.0 * norms::linear_growth_envelope(grid, coeffs.b1.slice(k), d))
        .collect();
    let dt = grid.time_step();
    Ok(GrowthEnvelope {
        l1: norms::time_norm(&h, dt, 1.0),
        l1e: norms::time_norm(&h, dt, 1.0 + epsilon),
        h,
    })
}

/// Pointwise data of the transform at `x = Φ_t⁻¹(y)` on slice `k`.
struct Pullback {
    x: [f64; MAX_DIM],
    u: [f64; MAX_DIM],
    /// `I + J`, row-major.
    dphi: [f64; MAX_DIM * MAX_DIM],
}

fn pullback(sol: &ZvonkinSolution, k: usize, y: &[f64]) -> Result<Pullback> {
    let d = y.len();
    let (xv, _) = zvonkin::phi_inverse_slice(sol, k, y)?;
    let mut p = Pullback {
        x: [0.0; MAX_DIM],
        u: [0.0; MAX_DIM],
        dphi: [0.0; MAX_DIM * MAX_DIM],
    };
    p.x[..d].copy_from_slice(&xv);
    sol.u.evaluate_slice_into(k, &xv, &mut p.u[..d])?;
    sol.grad_u
        .evaluate_slice_into(k, &xv, &mut p.dphi[..d * d])?;
    for i in 0..d {
        p.dphi[i * d + i] += 1.0;
    }
    Ok(p)
}

fn transformed_at(
    coeffs: &CoefficientSet,
    sol: &ZvonkinSolution,
    k: usize,
    y: &[f64],
    b_out: &mut [f64],
    s_out: &mut [f64],
) -> Result<()> {
    let d = y.len();
    let p = pullback(sol, k, y)?;
    let x = &p.x[..d];
    let mut b1 = [0.0; MAX_DIM];
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    coeffs.b1.evaluate_slice_into(k, x, &mut b1[..d])?;
    coeffs.sigma.evaluate_slice_into(k, x, &mut sig[..d * d])?;
    for i in 0..d {
        let mut acc = sol.lambda_bar * p.u[i];
        for j in 0..d {
            acc += p.dphi[i * d + j] * b1[j];
        }
        b_out[i] = acc;
        for c in 0..d {
            s_out[i * d + c] = (0..d).map(|j| p.dphi[i * d + j] * sig[j * d + c]).sum();
        }
    }
    Ok(())
}

/// Evaluates `b̃` and `σ̃` at an arbitrary point without resampling.
pub fn transformed_at_point(
    coeffs: &CoefficientSet,
    sol: &ZvonkinSolution,
    t: f64,
    y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = y.len();
    let k = sol.grid().time_index(t).ok_or_else(|| Error::OutOfDomain {
        time: t,
        point: y.to_vec(),
    })?;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    transformed_at(coeffs, sol, k, y, &mut b, &mut s)?;
    Ok((b, s))
}

/// Nodal `b̃`, `σ̃` and the linear-growth certificate.
pub fn transformed_coefficients(
    coeffs: &CoefficientSet,
    sol: &ZvonkinSolution,
    epsilon: f64,
) -> Result<TransformedCoefficients> {
    let grid = *coeffs.b1.grid();
    if sol.grid() != &grid {
        return Err(Error::Parameter(
            "corrector and coefficients live on different grids".into(),
        ));
    }
    let d = grid.dim();
    let nodes = grid.node_count();
    let k_slices = grid.time_steps();
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..k_slices)
        .into_par_iter()
        .map(|k| {
            let mut b = vec![0.0; nodes * d];
            let mut s = vec![0.0; nodes * d * d];
            let mut flags = vec![false; nodes];
            for node in 0..nodes {
                let y = grid.node_coords(node);
                let r = transformed_at(
                    coeffs,
                    sol,
                    k,
                    &y[..d],
                    &mut b[node * d..(node + 1) * d],
                    &mut s[node * d * d..(node + 1) * d * d],
                );
                match r {
                    Ok(()) => {}
                    Err(Error::OutOfDomain { .. }) => flags[node] = true,
                    Err(e) => return Err(e),
                }
            }
            Ok((b, s, flags))
        })
        .collect::<Result<_>>()?;
    let mut bv = Vec::with_capacity(k_slices * nodes * d);
    let mut sv = Vec::with_capacity(k_slices * nodes * d * d);
    let mut flagged = Vec::with_capacity(k_slices * nodes);
    for (b, s, f) in results {
        bv.extend(b);
        sv.extend(s);
        flagged.extend(f);
    }
    let b_tilde = SpaceTimeField::new(grid, d, bv)?;
    let sigma_tilde = SpaceTimeField::new(grid, d * d, sv)?;
    let env = growth_envelope_h(coeffs, sol, epsilon)?;

    // independent nodal maxima, excluding flagged nodes
    let mut slices = Vec::with_capacity(k_slices);
    let mut sigma_tilde_sup = 0.0f64;
    let mut sigma_sup = 0.0f64;
    for k in 0..k_slices {
        let mut e = 0.0f64;
        for node in 0..nodes {
            sigma_sup = sigma_sup.max(norms::spectral_norm(coeffs.sigma.node_value(k, node), d, d));
            if flagged[k * nodes + node] {
                continue;
            }
            let y = grid.node_coords(node);
            e = e.max(norm2(b_tilde.node_value(k, node)) / (1.0 + norm2(&y[..d])));
            sigma_tilde_sup =
                sigma_tilde_sup.max(norms::spectral_norm(sigma_tilde.node_value(k, node), d, d));
        }
        slices.push(SliceEnvelope {
            time: grid.time(k),
            envelope_b_tilde: e,
            h: env.h[k],
            margin: env.h[k] - e,
        });
    }
    let sigma_margin = 2.0 * sigma_sup - sigma_tilde_sup;
    let flagged_nodes = flagged.iter().filter(|&&f| f).count();
    let passed = slices
        .iter()
        .all(|s| s.margin >= -ENVELOPE_TOLERANCE * (1.0 + s.h))
        && sigma_margin >= -ENVELOPE_TOLERANCE * (1.0 + sigma_sup);
    let envelope_certificate = EnvelopeCertificate {
        certificate: "transformed-coefficients".into(),
        lambda_bar: sol.lambda_bar,
        h_l1: env.l1,
        h_l1e: env.l1e,
        sigma_sup,
        sigma_tilde_sup,
        sigma_margin,
        slices,
        flagged_nodes,
        passed,
    };
    Ok(TransformedCoefficients {
        b_tilde,
        sigma_tilde,
        h: env.h,
        flagged,
        envelope_certificate,
    })
}

/// `e^{‖h‖_{L¹}} (|Y₀| + sup|Z|)`.
pub fn gronwall_bound(y0_abs: f64, z_sup: f64, h_l1: f64) -> Result<f64> {
    if !(y0_abs >= 0.0 && z_sup >= 0.0 && h_l1 >= 0.0) {
        return Err(Error::Parameter(
            "Grönwall inputs must be nonnegative".into(),
        ));
    }
    Ok(h_l1.exp() * (y0_abs + z_sup))
}

/// Upstream quantities entering the explicit path constant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathConstants {
    pub lambda_bar: f64,
    /// `‖h‖_{L^{1+ε}_t}`.
    pub h_l1e: f64,
    pub c_half_t_norm: f64,
    pub horizon: f64,
    pub epsilon: f64,
}

impl PathConstants {
    /// Hölder exponent `γ = ε/(1+ε)`.
    pub fn gamma(&self) -> f64 {
        self.epsilon / (1.0 + self.epsilon)
    }

    /// The constant `C` in `‖X‖_{C^γ} ≤ C(1 + |X₀| + ‖Z‖_{C^γ})`.
    ///
    /// Chain: `‖h‖_{L¹} ≤ T^γ H`, `sup|Z| ≤ T^γ ⟦Z⟧_γ`, `|Y₀| ≤ |X₀| + ½`,
    /// `⟦Y⟧_γ ≤ H(1 + ‖Y‖_∞) + ⟦Z⟧_γ`, `sup|X| ≤ ‖Y‖_∞ + ½` and
    /// `⟦X⟧_γ ≤ 2⟦Y⟧_γ + 2c T^{½−γ}`, with `H = ‖h‖_{L^{1+ε}}`, `c` the
    /// time-½ constant of `u`. Requires `γ ≤ ½`.
    pub fn path_constant(&self) -> Result<f64> {
        let g = self.gamma();
        if !(g > 0.0 && g <= 0.5) {
            return Err(Error::Parameter(format!(
                "path constant needs ε/(1+ε) in (0, 1/2], got {g}"
            )));
        }
        let t = self.horizon;
        let h = self.h_l1e;
        let e = (t.powf(g) * h).exp();
        let a = (1.0 + 2.0 * h) * e;
        let c_x0 = a;
        let c_z = a * t.powf(g) + 2.0;
        let c_one = 0.5 * a + 0.5 + 2.0 * h + 2.0 * self.c_half_t_norm * t.powf(0.5 - g);
        Ok(c_x0.max(c_z).max(c_one))
    }
}

/// `C (1 + |X₀| + ‖Z‖_{C^γ})` with `C` from [`PathConstants::path_constant`].
pub fn x_path_bound(x0_abs: f64, z_holder_norm: f64, constants: &PathConstants) -> Result<f64> {
    if !(x0_abs >= 0.0 && z_holder_norm >= 0.0) {
        return Err(Error::Parameter(
            "path bound inputs must be nonnegative".into(),
        ));
    }
    Ok(constants.path_constant()? * (1.0 + x0_abs + z_holder_norm))
}
