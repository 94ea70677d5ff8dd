//! Splitting a drift in `L^q_t L^p_x` into a part that is bounded in space
//! and integrable in time, and a part that is uniformly small in `L^{d+ε}_x`.
//!
//! With `ε` the root of `(1+ε)/q + (d+ε)/p = 1` and per-slice thresholds
//! `R_t = ‖f_t‖_p^{p/(p-d-ε)}`, the split is the nodal mask
//! `f^≤ = f·1{|f| ≤ R_t}`, `f^> = f·1{|f| > R_t}`. On the grid both bounds
//! hold exactly because the same quadrature is used on both sides:
//! `Σ w |f^>|^{d+ε} ≤ R^{d+ε-p} Σ w |f|^p = 1` and
//! `Σ_t Δt R_t^{1+ε} = Σ_t Δt ‖f_t‖_p^q`.
//!
//! In the uniformly local variant the slice norm is the equivalent quantity
//! `N_t = (max_z Σ w χ_z^{d+ε} |f|^p)^{1/p}`, which makes the `L̃^{d+ε}` bound
//! exact on the shift lattice as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::norms::{self, Quadrature};

/// Root `ε` of `(1+ε)/q + (d+ε)/p = 1`.
pub fn critical_epsilon(p: f64, q: f64, d: usize) -> Result<f64> {
    if p.is_nan() || q.is_nan() || p < 1.0 || q < 1.0 {
        return Err(Error::Parameter(format!(
            "exponents (p, q) = ({p}, {q}) must lie in [1, inf]"
        )));
    }
    if p.is_infinite() && q.is_infinite() {
        return Err(Error::Parameter(
            "p = q = inf leaves epsilon undetermined".into(),
        ));
    }
    let (ip, iq) = (1.0 / p, 1.0 / q);
    let slack = 1.0 - iq - d as f64 * ip;
    if slack <= 0.0 {
        return Err(Error::Precondition(format!(
            "1/q + d/p = {} must be < 1",
            iq + d as f64 * ip
        )));
    }
    Ok(slack / (iq + ip))
}

/// `R = ‖f_t‖^{p/(p-d-ε)}`; for `p = ∞` the exponent is 1.
pub fn threshold(slice_norm: f64, p: f64, d: usize, epsilon: f64) -> Result<f64> {
    if slice_norm.is_nan() || slice_norm < 0.0 {
        return Err(Error::Data(format!(
            "slice norm {slice_norm} must be nonnegative"
        )));
    }
    if p.is_infinite() {
        return Ok(slice_norm);
    }
    let gap = p - d as f64 - epsilon;
    if gap <= 0.0 {
        return Err(Error::Precondition(format!(
            "threshold exponent degenerates: p = {p} <= d + eps = {}",
            d as f64 + epsilon
        )));
    }
    if slice_norm == 0.0 {
        return Ok(0.0);
    }
    Ok(slice_norm.powf(p / gap))
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub f_le: SpaceTimeField,
    pub f_gt: SpaceTimeField,
    /// `‖f^≤‖_{L^{1+ε}_t L^∞_x}`.
    pub certified_le_norm: f64,
    /// `sup_t ‖f^>_t‖_{L^{d+ε}_x}` (or `L̃^{d+ε}_x`).
    pub certified_gt_norm: f64,
    pub certificate: DecompositionCertificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionCertificate {
    pub certificate: String,
    pub p: f64,
    pub q: f64,
    pub dim: usize,
    pub uniformly_local: bool,
    pub epsilon: f64,
    pub slice_norms: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub gt_slice_norms: Vec<f64>,
    pub certified_gt_norm: f64,
    pub certified_le_norm: f64,
    /// `‖f‖_{L^q_t L^p_x}^{q/(1+ε)}` with the slice norms above.
    pub le_bound: f64,
    pub gt_margin: f64,
    pub le_margin: f64,
    pub passed: bool,
}

/// Relative slack granted to floating-point summation in the certificates.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-9;

pub fn decompose(
    field: &SpaceTimeField,
    p: f64,
    q: f64,
    uniformly_local: bool,
) -> Result<DecompositionResult> {
    let grid = *field.grid();
    let d = grid.dim();
    if q.is_infinite() {
        return Err(Error::Parameter(format!(
            "q = inf is not split; treat f as already in L^inf_t L~^(d+eps')_x with eps' = p - d = {}",
            p - d as f64
        )));
    }
    let epsilon = critical_epsilon(p, q, d)?;
    let codim = field.codim();
    let k_slices = grid.time_steps();
    let gt_exp = d as f64 + epsilon;

    let slice_norms: Vec<f64> = (0..k_slices)
        .map(|k| {
            let s = field.slice(k);
            if p.is_infinite() {
                norms::lp_space_norm(&grid, s, codim, p)
            } else if uniformly_local {
                Ok(
                    norms::local_power_sum(&grid, s, codim, p, gt_exp, Quadrature::default())?
                        .powf(1.0 / p),
                )
            } else {
                norms::lp_space_norm(&grid, s, codim, p)
            }
        })
        .collect::<Result<_>>()?;
    let thresholds: Vec<f64> = slice_norms
        .iter()
        .map(|&n| threshold(n, p, d, epsilon))
        .collect::<Result<_>>()?;

    let mut f_le = SpaceTimeField::zeros(grid, codim);
    let mut f_gt = SpaceTimeField::zeros(grid, codim);
    for (k, &r) in thresholds.iter().enumerate() {
        let src = field.slice(k);
        let le = f_le.slice_mut(k);
        for (node, vals) in src.chunks(codim).enumerate() {
            if crate::grid::norm2(vals) <= r {
                le[node * codim..(node + 1) * codim].copy_from_slice(vals);
            }
        }
        let gt = f_gt.slice_mut(k);
        for (node, vals) in src.chunks(codim).enumerate() {
            if crate::grid::norm2(vals) > r {
                gt[node * codim..(node + 1) * codim].copy_from_slice(vals);
            }
        }
    }

    let gt_slice_norms: Vec<f64> = (0..k_slices)
        .map(|k| {
            if uniformly_local {
                norms::uniformly_local_norm(&grid, f_gt.slice(k), codim, gt_exp)
            } else {
                norms::lp_space_norm(&grid, f_gt.slice(k), codim, gt_exp)
            }
        })
        .collect::<Result<_>>()?;
    let certified_gt_norm = gt_slice_norms.iter().cloned().fold(0.0, f64::max);
    let le_sup: Vec<f64> = (0..k_slices)
        .map(|k| norms::lp_space_norm(&grid, f_le.slice(k), codim, f64::INFINITY))
        .collect::<Result<_>>()?;
    let dt = grid.time_step();
    let certified_le_norm = norms::time_norm(&le_sup, dt, 1.0 + epsilon);
    let le_bound = norms::time_norm(&slice_norms, dt, q).powf(q / (1.0 + epsilon));

    let gt_margin = 1.0 - certified_gt_norm;
    let le_margin = le_bound - certified_le_norm;
    let passed = gt_margin >= -CERTIFICATE_TOLERANCE
        && le_margin >= -CERTIFICATE_TOLERANCE * (1.0 + le_bound);
    let certificate = DecompositionCertificate {
        certificate: "decomposition".into(),
        p,
        q,
        dim: d,
        uniformly_local,
        epsilon,
        slice_norms,
        thresholds: thresholds.clone(),
        gt_slice_norms,
        certified_gt_norm,
        certified_le_norm,
        le_bound,
        gt_margin,
        le_margin,
        passed,
    };
    Ok(DecompositionResult {
        epsilon,
        thresholds,
        f_le,
        f_gt,
        certified_le_norm,
        certified_gt_norm,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;

    #[test]
    fn epsilon_examples() {
        let e = critical_epsilon(6.0, 3.0, 2).unwrap();
        assert_relative_eq!(e, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!((1.0 + e) / 3.0 + (2.0 + e) / 6.0, 1.0, epsilon = 1e-15);
        let e = critical_epsilon(4.0, 4.0, 2).unwrap();
        assert_relative_eq!(e, 0.5, epsilon = 1e-15);
        for d in 1..=3 {
            let e = critical_epsilon(d as f64 + 1.0, f64::INFINITY, d).unwrap();
            assert_relative_eq!(e, 1.0, epsilon = 1e-14);
        }
        // p = inf: 1 + eps = q
        assert_relative_eq!(
            critical_epsilon(f64::INFINITY, 3.0, 2).unwrap(),
            2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn epsilon_rejects_boundary_and_degenerate_exponents() {
        assert!(matches!(
            critical_epsilon(4.0, 2.0, 2),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            critical_epsilon(3.0, 2.0, 2),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            critical_epsilon(f64::INFINITY, f64::INFINITY, 2),
            Err(Error::Parameter(_))
        ));
        assert!(critical_epsilon(0.5, 3.0, 1).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(1.0, 6.0, 2, 2.0 / 3.0).unwrap(), 1.0);
        assert_eq!(threshold(0.0, 6.0, 2, 2.0 / 3.0).unwrap(), 0.0);
        let r = threshold(2.0, 4.0, 2, 0.5).unwrap();
        assert_relative_eq!(r, 2f64.powf(8.0 / 3.0), epsilon = 1e-12);
        assert!((r - 6.349604).abs() < 1e-6);
        assert!(matches!(
            threshold(1.0, 2.5, 2, 0.5),
            Err(Error::Precondition(_))
        ));
    }

    fn grid() -> Grid {
        Grid::new(2, 1.0, 17, 1.0, 5).unwrap()
    }

    #[test]
    fn fields_below_threshold_stay_in_bounded_part() {
        let g = grid();
        let f =
            SpaceTimeField::from_fn(g, 1, |_, x, o| o[0] = 1.0 + 0.1 * (x[0] + 0.5 * x[1]).sin())
                .unwrap();
        let r = decompose(&f, 6.0, 3.0, false).unwrap();
        let min_r = r.thresholds.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(f.values().iter().all(|v| v.abs() <= min_r));
        assert!(r.f_gt.values().iter().all(|&v| v == 0.0));
        assert_eq!(r.f_le.values(), f.values());
    }

    /// Spike of height 10·R on one node: brute-force the L^{d+ε} norm of f^> on its support.
    #[test]
    fn single_spike_goes_to_singular_part() {
        let g = grid();
        let base = 0.005;
        let (p, q) = (6.0, 3.0);
        let eps = critical_epsilon(p, q, 2).unwrap();
        let spike_node = g.node_index(&[8, 8]);
        let mut vals = vec![base; g.time_steps() * g.node_count()];
        let h = 0.2;
        for k in 0..g.time_steps() {
            vals[k * g.node_count() + spike_node] = h;
        }
        let f = SpaceTimeField::new(g, 1, vals).unwrap();
        let r = decompose(&f, p, q, false).unwrap();
        let w = g.spacing().powi(2);
        for k in 0..g.time_steps() {
            assert!(h >= 10.0 * r.thresholds[k]);
            assert!(base <= r.thresholds[k]);
            assert_eq!(r.f_le.node_value(k, spike_node)[0], 0.0);
            assert_eq!(r.f_gt.node_value(k, spike_node)[0], h);
            let support_norm = (w * h.powf(2.0 + eps)).powf(1.0 / (2.0 + eps));
            assert_relative_eq!(
                r.certificate.gt_slice_norms[k],
                support_norm,
                max_relative = 1e-12
            );
            assert!(support_norm <= 1.0 + 1e-12);
        }
        assert!(r.certificate.passed);
    }

    /// Constant fields: thresholds are constant and the split is all-or-nothing.
    #[test]
    fn constant_fields_split_all_or_nothing() {
        let g = grid();
        let (p, q) = (4.0, 4.0);
        let eps = 0.5;
        let vol: f64 = 4.0; // [-1,1]^2, exact for the trapezoid rule
        for c in [0.3, 50.0] {
            let f = SpaceTimeField::constant(g, &[c]);
            let r = decompose(&f, p, q, false).unwrap();
            let norm_p = c * vol.powf(1.0 / p);
            let expect_r = norm_p.powf(p / (p - 2.0 - eps));
            for &t in &r.thresholds {
                assert_relative_eq!(t, expect_r, max_relative = 1e-12);
            }
            if c <= expect_r {
                assert_eq!(r.f_le.values(), f.values());
                assert_relative_eq!(
                    r.certified_le_norm,
                    c * 1f64.powf(1.0 / (1.0 + eps)),
                    max_relative = 1e-12
                );
            } else {
                assert_eq!(r.f_gt.values(), f.values());
                let gt = c * vol.powf(1.0 / (2.0 + eps));
                assert_relative_eq!(r.certified_gt_norm, gt, max_relative = 1e-12);
                assert!(gt <= 1.0 + 1e-12);
            }
            assert!(r.certificate.passed);
        }
    }

    #[test]
    fn infinite_space_exponent_keeps_everything_bounded() {
        let g = grid();
        let f = SpaceTimeField::from_fn(g, 2, |t, x, o| {
            o[0] = 10.0 * t + x[0];
            o[1] = -x[1];
        })
        .unwrap();
        let r = decompose(&f, f64::INFINITY, 3.0, false).unwrap();
        assert_relative_eq!(r.epsilon, 2.0, epsilon = 1e-15);
        assert_eq!(r.f_le.values(), f.values());
        assert!(r.f_gt.values().iter().all(|&v| v == 0.0));
        assert!(r.certificate.passed);
    }

    #[test]
    fn infinite_time_exponent_is_rejected() {
        let f = SpaceTimeField::zeros(grid(), 1);
        assert!(matches!(
            decompose(&f, 4.0, f64::INFINITY, false),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn uniformly_local_split_certifies_lattice_bound() {
        let g = Grid::new(2, 4.0, 33, 1.0, 3).unwrap();
        let f = SpaceTimeField::from_fn(g, 2, |t, x, o| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(0.05);
            let amp = 0.1 * (1.0 + t) * r.powf(-0.6);
            o[0] = amp * x[0] / r;
            o[1] = amp * x[1] / r;
        })
        .unwrap();
        let r = decompose(&f, 8.0, 4.0, true).unwrap();
        assert!(r.certified_gt_norm <= 1.0 + 1e-9, "{}", r.certified_gt_norm);
        assert!(r.certificate.passed);
        assert!(r.f_gt.values().iter().any(|&v| v != 0.0));
    }
}
