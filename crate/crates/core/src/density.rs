//! Histogram marginals, their mixed norms, the weak Fokker–Planck residual
//! and duality pairings against space-time fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::decompose;
use crate::error::{Error, Result};
use crate::grid::{SpaceTimeField, MAX_DIM};
use crate::mollify::bump;
use crate::norms;
use crate::simulation::{PathEnsemble, SdeCoefficients};

/// Per-slice masses on `bins^dim` equal cells tiling `[-L, L]^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDensity {
    pub dim: usize,
    pub half_width: f64,
    pub bins: usize,
    pub times: Vec<f64>,
    /// `masses[i * bin_count + b]`; slice total is the surviving fraction.
    pub masses: Vec<f64>,
    pub bandwidth: Option<f64>,
}

impl EmpiricalDensity {
    /// Wraps precomputed masses, e.g. from an exact law.
    pub fn from_masses(
        dim: usize,
        half_width: f64,
        bins: usize,
        times: Vec<f64>,
        masses: Vec<f64>,
    ) -> Result<Self> {
        let d = Self {
            dim,
            half_width,
            bins,
            times,
            masses,
            bandwidth: None,
        };
        if dim == 0 || dim > MAX_DIM || bins == 0 || half_width <= 0.0 {
            return Err(Error::Parameter(
                "histogram needs 1 ≤ dim ≤ 3, bins ≥ 1, L > 0".into(),
            ));
        }
        if d.masses.len() != d.times.len() * d.bin_count() || d.masses.iter().any(|m| !(*m >= 0.0))
        {
            return Err(Error::Data(
                "masses must be nonnegative, one per (time, bin)".into(),
            ));
        }
        Ok(d)
    }

    pub fn bin_count(&self) -> usize {
        self.bins.pow(self.dim as u32)
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.half_width / self.bins as f64
    }

    pub fn bin_volume(&self) -> f64 {
        self.bin_width().powi(self.dim as i32)
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let n = self.bin_count();
        &self.masses[i * n..(i + 1) * n]
    }

    pub fn total_mass(&self, i: usize) -> f64 {
        self.slice(i).iter().sum()
    }

    /// Bin multi-index along each axis (axis 0 fastest).
    pub fn bin_index(&self, b: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut rest = b;
        for i in idx.iter_mut().take(self.dim) {
            *i = rest % self.bins;
            rest /= self.bins;
        }
        idx
    }

    pub fn bin_of(&self, x: &[f64]) -> usize {
        let w = self.bin_width();
        let mut flat = 0;
        for a in (0..self.dim).rev() {
            let i = (((x[a] + self.half_width) / w).floor().max(0.0) as usize).min(self.bins - 1);
            flat = flat * self.bins + i;
        }
        flat
    }

    /// Lower corner of bin `b`.
    pub fn bin_lower(&self, b: usize) -> [f64; MAX_DIM] {
        let idx = self.bin_index(b);
        let w = self.bin_width();
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = -self.half_width + idx[a] as f64 * w;
        }
        x
    }

    pub fn bin_center(&self, b: usize) -> [f64; MAX_DIM] {
        let mut x = self.bin_lower(b);
        let w = self.bin_width();
        x.iter_mut().take(self.dim).for_each(|v| *v += 0.5 * w);
        x
    }

    /// Largest total-variation distance between adjacent slices.
    pub fn max_adjacent_tv(&self) -> f64 {
        (0..self.times.len().saturating_sub(1))
            .map(|i| {
                0.5 * self
                    .slice(i)
                    .iter()
                    .zip(self.slice(i + 1))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    fn slice_lp(&self, i: usize, p: f64) -> f64 {
        let v = self.bin_volume();
        (self.slice(i).iter().map(|m| (m / v).powf(p)).sum::<f64>() * v).powf(1.0 / p)
    }
}

/// Histogram of an ensemble; a path counts at reporting index `i` only while
/// it has not left the box, so slice totals equal surviving fractions.
pub fn empirical_density(
    ensemble: &PathEnsemble,
    bins: usize,
    bandwidth: Option<f64>,
) -> Result<EmpiricalDensity> {
    let n = ensemble.n_paths();
    if n == 0 {
        return Err(Error::Parameter("empty ensemble".into()));
    }
    let half_width = ensemble_half_width(ensemble)?;
    let mut dens = EmpiricalDensity::from_masses(
        ensemble.dim,
        half_width,
        bins,
        ensemble.times.clone(),
        vec![0.0; ensemble.times.len() * bins.pow(ensemble.dim as u32)],
    )?;
    let every = ensemble.config.report_every;
    let nb = dens.bin_count();
    let weight = 1.0 / n as f64;
    let proto = dens.clone();
    dens.masses
        .par_chunks_mut(nb)
        .enumerate()
        .for_each(|(i, slice)| {
            for p in 0..n {
                if ensemble.exit_steps[p].is_some_and(|s| s <= i * every) {
                    continue;
                }
                slice[proto.bin_of(ensemble.state(p, i))] += weight;
            }
        });
    match bandwidth {
        Some(w) => smooth(&dens, w),
        None => Ok(dens),
    }
}

fn ensemble_half_width(e: &PathEnsemble) -> Result<f64> {
    if e.box_half_width > 0.0 {
        Ok(e.box_half_width)
    } else {
        Err(Error::Parameter("ensemble does not record its box".into()))
    }
}

/// Scatters every bin's mass over neighbours with bump weights normalized on
/// in-box bins, so slice totals are unchanged.
pub fn smooth(density: &EmpiricalDensity, bandwidth: f64) -> Result<EmpiricalDensity> {
    if !(bandwidth > 0.0) {
        return Err(Error::Parameter("bandwidth must be positive".into()));
    }
    let w = density.bin_width();
    let reach = (bandwidth / w).ceil() as isize;
    let d = density.dim;
    let span = (2 * reach + 1) as usize;
    let mut offsets = Vec::new();
    for flat in 0..span.pow(d as u32) {
        let mut o = [0isize; MAX_DIM];
        let mut rest = flat;
        let mut r2 = 0.0;
        for oa in o.iter_mut().take(d) {
            *oa = (rest % span) as isize - reach;
            rest /= span;
            r2 += (*oa as f64 * w).powi(2);
        }
        let k = bump(r2.sqrt() / bandwidth);
        if k > 0.0 {
            offsets.push((o, k));
        }
    }
    let nb = density.bin_count();
    let bins = density.bins as isize;
    let mut out = density.clone();
    out.bandwidth = Some(bandwidth);
    out.masses
        .par_chunks_mut(nb)
        .enumerate()
        .for_each(|(i, dst)| {
            dst.iter_mut().for_each(|v| *v = 0.0);
            let src = density.slice(i);
            let mut targets = Vec::with_capacity(offsets.len());
            for (b, &m) in src.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                let idx = density.bin_index(b);
                targets.clear();
                let mut norm = 0.0;
                'offs: for (o, k) in &offsets {
                    let mut flat = 0usize;
                    for a in (0..d).rev() {
                        let j = idx[a] as isize + o[a];
                        if j < 0 || j >= bins {
                            continue 'offs;
                        }
                        flat = flat * density.bins + j as usize;
                    }
                    targets.push((flat, *k));
                    norm += k;
                }
                for &(t, k) in &targets {
                    dst[t] += m * k / norm;
                }
            }
        });
    Ok(out)
}

/// Checks `1 < p̃, q̃ < ∞` and `1/q̃ + d/p̃ > d`.
pub fn check_density_exponents(p_tilde: f64, q_tilde: f64, dim: usize) -> Result<()> {
    let ok = p_tilde > 1.0
        && q_tilde > 1.0
        && p_tilde.is_finite()
        && q_tilde.is_finite()
        && 1.0 / q_tilde + dim as f64 / p_tilde > dim as f64;
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "(p̃, q̃) = ({p_tilde}, {q_tilde}) outside the open region 1/q̃ + {dim}/p̃ > {dim}"
        )))
    }
}

/// `‖μ‖_{L^{q̃}_t L^{p̃}_x}` of the piecewise-constant density, left rule in time.
pub fn density_mixed_norm(density: &EmpiricalDensity, p_tilde: f64, q_tilde: f64) -> Result<f64> {
    check_density_exponents(p_tilde, q_tilde, density.dim)?;
    if density.times.len() < 2 {
        return Err(Error::Parameter("density needs at least two slices".into()));
    }
    let per: Vec<f64> = (0..density.times.len())
        .map(|i| density.slice_lp(i, p_tilde))
        .collect();
    let dt = density.times[1] - density.times[0];
    Ok(norms::time_norm(&per, dt, q_tilde))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentRow {
    pub p_tilde: f64,
    pub q_tilde: f64,
    /// One norm per level, in the order supplied.
    pub norms: Vec<f64>,
    pub sup: f64,
    /// `(max − min) / min` over levels.
    pub relative_variation: f64,
    /// `headroom · ‖μ^{ref}‖ / (1 + E|X₀|)`.
    pub empirical_constant: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityCertificate {
    pub certificate: String,
    pub levels: Vec<usize>,
    pub reference_level: usize,
    pub first_moment: f64,
    pub headroom: f64,
    pub rows: Vec<ExponentRow>,
    pub passed: bool,
}

/// Mixed norms across levels; the empirical constant is fixed at the first
/// level and every level must stay below `C (1 + E|X₀|)`.
pub fn density_mixed_norm_check(
    levels: &[(usize, &EmpiricalDensity)],
    exponents: &[(f64, f64)],
    first_moment: f64,
    headroom: f64,
) -> Result<DensityCertificate> {
    let (reference_level, _) = *levels
        .first()
        .ok_or_else(|| Error::Parameter("no levels".into()))?;
    let rows = exponents
        .iter()
        .map(|&(p, q)| {
            let norms: Vec<f64> = levels
                .iter()
                .map(|(_, d)| density_mixed_norm(d, p, q))
                .collect::<Result<_>>()?;
            let sup = norms.iter().cloned().fold(0.0, f64::max);
            let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
            let empirical_constant = headroom * norms[0] / (1.0 + first_moment);
            Ok(ExponentRow {
                p_tilde: p,
                q_tilde: q,
                sup,
                relative_variation: (sup - min) / min,
                within_bound: sup <= empirical_constant * (1.0 + first_moment),
                empirical_constant,
                norms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityCertificate {
        certificate: "density-mixed-norm".into(),
        levels: levels.iter().map(|l| l.0).collect(),
        reference_level,
        first_moment,
        headroom,
        passed: rows.iter().all(|r| r.within_bound && r.sup.is_finite()),
        rows,
    })
}

/// `φ(t, x) = θ(t) ψ((x − c)/r)` with `θ(t) = (1 − s²)⁴`, `s = 2t/T − 1`,
/// `ψ(y) = Π (1 − y_a²)⁴₊`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub scale: f64,
    /// Zero test function when false.
    pub active: bool,
}

pub const TEST_BANK_VERSION: u32 = 1;
pub const TEST_BANK_CENTERS: [f64; 3] = [-2.0, 0.0, 2.0];
pub const TEST_BANK_SCALES: [f64; 3] = [2.0, 3.0, 5.0];

/// Tensor lattice of centers times the fixed scales.
pub fn test_bank(dim: usize) -> Vec<TestFunction> {
    let mut out = Vec::new();
    let n = TEST_BANK_CENTERS.len();
    for &scale in &TEST_BANK_SCALES {
        for flat in 0..n.pow(dim as u32) {
            let mut rest = flat;
            let center = (0..dim)
                .map(|_| {
                    let c = TEST_BANK_CENTERS[rest % n];
                    rest /= n;
                    c
                })
                .collect();
            out.push(TestFunction {
                center,
                scale,
                active: true,
            });
        }
    }
    out
}

fn profile(y: f64) -> [f64; 3] {
    if y.abs() >= 1.0 {
        return [0.0; 3];
    }
    let s = 1.0 - y * y;
    let s2 = s * s;
    [
        s2 * s2,
        -8.0 * y * s2 * s,
        -8.0 * s2 * s + 48.0 * y * y * s2,
    ]
}

fn theta(t: f64, horizon: f64) -> [f64; 2] {
    let s = 2.0 * t / horizon - 1.0;
    let v = 1.0 - s * s;
    [v.powi(4), -8.0 * s * v.powi(3) * 2.0 / horizon]
}

impl TestFunction {
    /// `(ψ, ∇ψ, ∇²ψ)` at `x`, Hessian row-major.
    fn spatial(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = self.center.len();
        let mut p = [[0.0; 3]; MAX_DIM];
        for a in 0..d {
            p[a] = profile((x[a] - self.center[a]) / self.scale);
        }
        let r = self.scale;
        let mut value = 1.0;
        for pa in p.iter().take(d) {
            value *= pa[0];
        }
        for i in 0..d {
            for j in 0..d {
                let mut v = 1.0;
                for (a, pa) in p.iter().enumerate().take(d) {
                    let order = (a == i) as usize + (a == j) as usize;
                    v *= pa[order];
                }
                hess[i * d + j] = v / (r * r);
            }
            let mut g = 1.0;
            for (a, pa) in p.iter().enumerate().take(d) {
                g *= pa[(a == i) as usize];
            }
            grad[i] = g / r;
        }
        value
    }

    fn touches_boundary(&self, half_width: f64) -> bool {
        self.center
            .iter()
            .any(|c| c.abs() + self.scale >= half_width)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpRow {
    pub center: Vec<f64>,
    pub scale: f64,
    pub residual: f64,
    pub skipped: bool,
    /// `∫∫_{supp φ} |b| dμ dt`.
    pub drift_mass: f64,
    /// `∫∫_{supp φ} |a| dμ dt`.
    pub diffusion_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpReport {
    pub certificate: String,
    pub bank_version: u32,
    pub rows: Vec<FpRow>,
    pub max_residual: f64,
    pub skipped: usize,
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// `|∫∫ (∂_tφ + b·∇φ + ½ a:∇²φ) dμ_t dt|` per test function: 4-point
/// Gauss–Legendre bin averages in space, trapezoid rule in time.
pub fn fokker_planck_residual<C: SdeCoefficients>(
    density: &EmpiricalDensity,
    coeffs: &C,
    bank: &[TestFunction],
) -> Result<FpReport> {
    let d = density.dim;
    if coeffs.dim() != d {
        return Err(Error::Parameter(
            "coefficient and density dimensions differ".into(),
        ));
    }
    let nt = density.times.len();
    if nt < 2 {
        return Err(Error::Parameter("density needs at least two slices".into()));
    }
    let horizon = density.times[nt - 1];
    let w = density.bin_width();
    let nq = GAUSS4.len().pow(d as u32);
    let rows = bank
        .par_iter()
        .map(|phi| -> Result<FpRow> {
            let blank = FpRow {
                center: phi.center.clone(),
                scale: phi.scale,
                residual: 0.0,
                skipped: false,
                drift_mass: 0.0,
                diffusion_mass: 0.0,
            };
            if !phi.active {
                return Ok(blank);
            }
            if phi.touches_boundary(density.half_width) {
                return Ok(FpRow {
                    skipped: true,
                    ..blank
                });
            }
            let (mut total, mut bmass, mut amass) = (0.0, 0.0, 0.0);
            let mut grad = [0.0; MAX_DIM];
            let mut hess = [0.0; MAX_DIM * MAX_DIM];
            let mut b = [0.0; MAX_DIM];
            let mut s = [0.0; MAX_DIM * MAX_DIM];
            let mut x = [0.0; MAX_DIM];
            for i in 0..nt {
                let t = density.times[i];
                let tw = if i == 0 {
                    0.5 * (density.times[1] - t)
                } else if i == nt - 1 {
                    0.5 * (t - density.times[i - 1])
                } else {
                    0.5 * (density.times[i + 1] - density.times[i - 1])
                };
                let [th, dth] = theta(t, horizon);
                let mut slice_sum = 0.0;
                for (bin, &m) in density.slice(i).iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let lo = density.bin_lower(bin);
                    if (0..d).any(|a| {
                        lo[a] + w <= phi.center[a] - phi.scale || lo[a] >= phi.center[a] + phi.scale
                    }) {
                        continue;
                    }
                    let (mut avg, mut bavg, mut aavg) = (0.0, 0.0, 0.0);
                    for q in 0..nq {
                        let mut rest = q;
                        let mut qw = 1.0;
                        for a in 0..d {
                            let (node, weight) = GAUSS4[rest % GAUSS4.len()];
                            rest /= GAUSS4.len();
                            x[a] = lo[a] + 0.5 * w * (1.0 + node);
                            qw *= 0.5 * weight;
                        }
                        let psi = phi.spatial(&x[..d], &mut grad[..d], &mut hess[..d * d]);
                        coeffs.drift(t, &x[..d], &mut b[..d])?;
                        coeffs.diffusion(t, &x[..d], &mut s[..d * d])?;
                        let mut gen = dth * psi;
                        for k in 0..d {
                            gen += th * b[k] * grad[k];
                        }
                        let mut a_norm = 0.0;
                        for k in 0..d {
                            for l in 0..d {
                                let akl: f64 = (0..d).map(|j| s[k * d + j] * s[l * d + j]).sum();
                                gen += 0.5 * th * akl * hess[k * d + l];
                                a_norm += akl * akl;
                            }
                        }
                        avg += qw * gen;
                        bavg += qw * crate::grid::norm2(&b[..d]);
                        aavg += qw * a_norm.sqrt();
                    }
                    slice_sum += m * avg;
                    bmass += tw * m * bavg;
                    amass += tw * m * aavg;
                }
                total += tw * slice_sum;
            }
            Ok(FpRow {
                residual: total.abs(),
                drift_mass: bmass,
                diffusion_mass: amass,
                ..blank
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FpReport {
        certificate: "fokker-planck-residual".into(),
        bank_version: TEST_BANK_VERSION,
        max_residual: rows
            .iter()
            .filter(|r| !r.skipped)
            .map(|r| r.residual)
            .fold(0.0, f64::max),
        skipped: rows.iter().filter(|r| r.skipped).count(),
        rows,
    })
}

/// `sup_i |⟨ψ, μ_{t_{i+1}} − μ_{t_i}⟩| / Δt^{1/2}` for a spatial bump `ψ`.
pub fn weak_continuity(density: &EmpiricalDensity, phi: &TestFunction) -> f64 {
    let d = density.dim;
    let mut grad = [0.0; MAX_DIM];
    let mut hess = [0.0; MAX_DIM * MAX_DIM];
    let values: Vec<f64> = (0..density.bin_count())
        .map(|b| {
            phi.spatial(
                &density.bin_center(b)[..d],
                &mut grad[..d],
                &mut hess[..d * d],
            )
        })
        .collect();
    (0..density.times.len().saturating_sub(1))
        .map(|i| {
            let diff: f64 = density
                .slice(i + 1)
                .iter()
                .zip(density.slice(i))
                .zip(&values)
                .map(|((a, b), v)| (a - b) * v)
                .sum();
            diff.abs() / (density.times[i + 1] - density.times[i]).sqrt()
        })
        .fold(0.0, f64::max)
}

fn time_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|i| match i {
            0 => 0.5 * (times[1] - times[0]),
            i if i == n - 1 => 0.5 * (times[i] - times[i - 1]),
            i => 0.5 * (times[i + 1] - times[i - 1]),
        })
        .collect()
}

/// `∫₀ᵀ ∫ |f| dμ_t dt`: `f` interpolated at bin centers, trapezoid in time.
pub fn duality_pairing(f: &SpaceTimeField, density: &EmpiricalDensity) -> Result<f64> {
    if f.grid().dim() != density.dim || density.times.len() < 2 {
        return Err(Error::Parameter(
            "field and density are incompatible".into(),
        ));
    }
    let tw = time_weights(&density.times);
    let centers: Vec<[f64; MAX_DIM]> = (0..density.bin_count())
        .map(|b| density.bin_center(b))
        .collect();
    let per: Vec<f64> = (0..density.times.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut v = vec![0.0; f.codim()];
            let mut s = 0.0;
            for (b, &m) in density.slice(i).iter().enumerate() {
                if m > 0.0 {
                    f.evaluate_into(density.times[i], &centers[b][..density.dim], &mut v)?;
                    s += m * crate::grid::norm2(&v);
                }
            }
            Ok(tw[i] * s)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityCertificate {
    pub certificate: String,
    pub pairing: f64,
    pub le_pairing: f64,
    /// `Σ_i w_i ‖f^≤_{t_i}‖_∞ · mass_i`, an exact bound for `le_pairing`.
    pub le_bound: f64,
    pub gt_pairing: f64,
    /// `gt_pairing / sup_t ‖f^>_t‖_{L^{d+ε}}`.
    pub gt_constant: f64,
    /// `pairing / ((1 + E|X₀|) · dual norm)`.
    pub empirical_constant: f64,
    pub passed: bool,
}

/// Splits `f` at `(p, q)` and bounds both halves of the pairing.
pub fn duality_check(
    f: &SpaceTimeField,
    density: &EmpiricalDensity,
    p: f64,
    q: f64,
    first_moment: f64,
) -> Result<DualityCertificate> {
    let split = decompose(f, p, q, false)?;
    let pairing = duality_pairing(f, density)?;
    let le_pairing = duality_pairing(&split.f_le, density)?;
    let gt_pairing = duality_pairing(&split.f_gt, density)?;
    let tw = time_weights(&density.times);
    let g = *f.grid();
    let le_bound: f64 = (0..density.times.len())
        .map(|i| {
            let k = g.time_index(density.times[i]).unwrap_or(g.time_steps() - 1);
            let sup = (0..g.node_count())
                .map(|n| split.f_le.node_magnitude(k, n))
                .fold(0.0, f64::max);
            tw[i] * density.total_mass(i) * sup
        })
        .sum();
    let gt_norm = split.certified_gt_norm;
    let dual = split.certified_le_norm + gt_norm;
    Ok(DualityCertificate {
        certificate: "duality-pairing".into(),
        pairing,
        le_pairing,
        le_bound,
        gt_pairing,
        gt_constant: if gt_norm > 0.0 {
            gt_pairing / gt_norm
        } else {
            0.0
        },
        empirical_constant: if dual > 0.0 {
            pairing / ((1.0 + first_moment) * dual)
        } else {
            0.0
        },
        passed: le_pairing <= le_bound * (1.0 + 1e-12) + 1e-15 && pairing.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::simulation::{euler_maruyama, FnCoefficients, InitialLaw, SimulationConfig};
    use crate::stats::normal_cdf;

    fn cfg(n: usize, t: f64, every: usize) -> SimulationConfig {
        SimulationConfig {
            n_paths: n,
            dt: 1e-3,
            horizon: t,
            report_every: every,
            master_seed: 3,
        }
    }

    fn brownian(drift: f64) -> FnCoefficients {
        FnCoefficients {
            dim: 1,
            half_width: 8.0,
            drift: Box::new(move |_, _, o| o[0] = drift),
            diffusion: Box::new(|_, _, o| o[0] = 1.0),
        }
    }

    /// Exact bin masses of `N(m + c t, s² + t)` on the histogram cells.
    fn gaussian_masses(bins: usize, l: f64, times: &[f64], m: f64, c: f64, s2: f64) -> Vec<f64> {
        let w = 2.0 * l / bins as f64;
        let mut out = Vec::new();
        for &t in times {
            let sd = (s2 + t).sqrt();
            for b in 0..bins {
                let lo = -l + b as f64 * w;
                let mass = if sd == 0.0 {
                    if (lo..lo + w).contains(&(m)) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    normal_cdf((lo + w - m - c * t) / sd) - normal_cdf((lo - m - c * t) / sd)
                };
                out.push(mass);
            }
        }
        out
    }

    #[test]
    fn frozen_point_mass_stays_in_one_bin() {
        let c = FnCoefficients {
            dim: 2,
            half_width: 4.0,
            drift: Box::new(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0)),
            diffusion: Box::new(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0)),
        };
        let mu0 = InitialLaw::PointMass {
            point: vec![0.3, -1.1],
        };
        let e = euler_maruyama(&c, &mu0, &cfg(100, 0.1, 10), 0).unwrap();
        let d = empirical_density(&e, 16, None).unwrap();
        for i in 0..d.times.len() {
            let nz: Vec<f64> = d.slice(i).iter().copied().filter(|&m| m > 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert!((nz[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_plus_exit_fraction_is_one() {
        let c = FnCoefficients {
            dim: 1,
            half_width: 1.0,
            drift: Box::new(|_, _, o| o[0] = 0.0),
            diffusion: Box::new(|_, _, o| o[0] = 1.0),
        };
        let mu0 = InitialLaw::PointMass { point: vec![0.0] };
        let e = euler_maruyama(&c, &mu0, &cfg(2000, 1.0, 10), 0).unwrap();
        let d = empirical_density(&e, 20, None).unwrap();
        let every = e.config.report_every;
        for i in 0..d.times.len() {
            let exited = e
                .exit_steps
                .iter()
                .filter(|s| s.is_some_and(|s| s <= i * every))
                .count() as f64
                / 2000.0;
            assert!((d.total_mass(i) + exited - 1.0).abs() < 1e-12);
        }
        assert!((d.total_mass(d.times.len() - 1) + e.exit_fraction() - 1.0).abs() < 1e-12);
        let s = smooth(&d, 0.3).unwrap();
        for i in 0..d.times.len() {
            assert!((s.total_mass(i) - d.total_mass(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_histogram_approaches_heat_kernel() {
        let mu0 = InitialLaw::PointMass { point: vec![0.0] };
        let mut errs = Vec::new();
        for (n, bins) in [(2_000, 16), (32_000, 64), (128_000, 128)] {
            let e = euler_maruyama(&brownian(0.0), &mu0, &cfg(n, 1.0, 1000), 0).unwrap();
            let d = empirical_density(&e, bins, None).unwrap();
            // L¹ distance of densities at t = 1: histogram vs exact kernel
            let w = d.bin_width();
            let mut l1 = 0.0;
            for (b, &m) in d.slice(1).iter().enumerate() {
                let lo = -8.0 + b as f64 * w;
                // sub-sample the kernel within each bin
                for k in 0..50 {
                    let x = lo + (k as f64 + 0.5) * w / 50.0;
                    let pdf = (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    l1 += (m / w - pdf).abs() * w / 50.0;
                }
            }
            errs.push(l1);
        }
        assert!(
            errs[1] < errs[0] && errs[2] < errs[1] && errs[2] < 0.04,
            "{errs:?}"
        );
    }

    #[test]
    fn uniform_density_norm_is_a_volume_power() {
        let times = vec![0.0, 0.5, 1.0];
        let (bins, l) = (8usize, 2.0);
        for dim in 1..=2usize {
            let nb = bins.pow(dim as u32);
            let masses = vec![1.0 / nb as f64; nb * 3];
            let d = EmpiricalDensity::from_masses(dim, l, bins, times.clone(), masses).unwrap();
            let vol = (2.0 * l).powi(dim as i32);
            for (p, q) in [(1.2, 1.5), (1.05, 3.0)] {
                if check_density_exponents(p, q, dim).is_err() {
                    continue;
                }
                // ‖1/V‖_{L^p} = V^{1/p − 1}; time: T^{1/q}
                let exact = vol.powf(1.0 / p - 1.0) * 1f64.powf(1.0 / q);
                assert!((density_mixed_norm(&d, p, q).unwrap() - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exponent_region_boundary_is_rejected() {
        // 1/q̃ + d/p̃ = d exactly
        assert!(check_density_exponents(2.0, 2.0, 1).is_err());
        assert!(check_density_exponents(1.5, 1.5, 1).is_ok());
        assert!(check_density_exponents(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn heat_kernel_norm_matches_exact_integral() {
        // ‖p_t‖_{L^p} = (2πt)^{-(p−1)/(2p)} p^{-1/(2p)} for the 1-D kernel.
        let (bins, l) = (512, 8.0);
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let masses = gaussian_masses(bins, l, &times, 0.0, 0.0, 0.0);
        let d = EmpiricalDensity::from_masses(1, l, bins, times.clone(), masses).unwrap();
        let (p, q) = (1.5, 1.5);
        let got = density_mixed_norm(&d, p, q).unwrap();
        // exact ∫_0^1 ‖p_t‖_p^q dt with ‖p_t‖_p^q ∝ t^{-q(p−1)/(2p)}
        let a = q * (p - 1.0) / (2.0 * p);
        let c = ((2.0 * std::f64::consts::PI).powf(-(p - 1.0) / (2.0 * p))
            * p.powf(-1.0 / (2.0 * p)))
        .powf(q);
        let exact = (c / (1.0 - a)).powf(1.0 / q);
        assert!(((got - exact) / exact).abs() < 0.05, "{got} vs {exact}");
    }

    #[test]
    fn smoothed_point_mass_norm_scales_with_bandwidth() {
        let (bins, l) = (512, 8.0);
        let times = vec![0.0, 1.0];
        let masses = gaussian_masses(bins, l, &times, 0.01, 0.0, 0.0)
            .into_iter()
            .enumerate()
            .map(|(i, m)| if i < bins { m } else { 0.0 })
            .collect::<Vec<_>>();
        let mut point = masses.clone();
        point[bins..].copy_from_slice(&masses[..bins]);
        let d = EmpiricalDensity::from_masses(1, l, bins, times, point).unwrap();
        let p = 1.5;
        let norms: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&w| density_mixed_norm(&smooth(&d, w).unwrap(), p, 1.5).unwrap())
            .collect();
        // slope −d/p′ = −(1 − 1/p)
        let slope = (norms[2] / norms[0]).ln() / 4f64.ln();
        assert!((slope + (1.0 - 1.0 / p)).abs() < 0.02, "{slope}");
        assert!(norms.iter().all(|n| n.is_finite()));
    }

    fn zero_bank() -> Vec<TestFunction> {
        vec![TestFunction {
            center: vec![0.0],
            scale: 2.0,
            active: false,
        }]
    }

    #[test]
    fn zero_test_function_has_zero_residual() {
        let times = vec![0.0, 0.5, 1.0];
        let d = EmpiricalDensity::from_masses(1, 8.0, 4, times, vec![0.25; 12]).unwrap();
        let r = fokker_planck_residual(&d, &brownian(0.0), &zero_bank()).unwrap();
        assert_eq!(r.rows[0].residual, 0.0);
    }

    #[test]
    fn test_function_derivatives_match_finite_differences() {
        let phi = TestFunction {
            center: vec![0.3, -0.2],
            scale: 1.7,
            active: true,
        };
        let x = [0.5, 0.4];
        let (mut g, mut h) = ([0.0; 2], [0.0; 4]);
        phi.spatial(&x, &mut g, &mut h);
        let e = 1e-5;
        for a in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[a] += e;
            xm[a] -= e;
            let (mut gp, mut gm, mut hh) = ([0.0; 2], [0.0; 2], [0.0; 4]);
            let fp = phi.spatial(&xp, &mut gp, &mut hh);
            let fm = phi.spatial(&xm, &mut gm, &mut hh);
            assert!(((fp - fm) / (2.0 * e) - g[a]).abs() < 1e-8);
            for b in 0..2 {
                assert!(((gp[b] - gm[b]) / (2.0 * e) - h[b * 2 + a]).abs() < 1e-7);
            }
        }
        let t = 0.3;
        let dt =
            ((theta(t + e, 1.0)[0] - theta(t - e, 1.0)[0]) / (2.0 * e) - theta(t, 1.0)[1]).abs();
        assert!(dt < 1e-8);
    }

    #[test]
    fn exact_laws_have_small_residuals() {
        // heat kernel and translated heat kernel from a Gaussian start
        for (c, s2) in [(0.0, 0.0), (0.7, 0.25)] {
            let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
            let masses = gaussian_masses(64, 8.0, &times, 0.0, c, s2);
            let d = EmpiricalDensity::from_masses(1, 8.0, 64, times, masses).unwrap();
            let r = fokker_planck_residual(&d, &brownian(c), &test_bank(1)).unwrap();
            assert!(r.max_residual < 1e-3, "{c}: {}", r.max_residual);
        }
    }

    #[test]
    fn simulated_translated_kernel_residual_is_small() {
        let mu0 = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 0.5,
        };
        let e = euler_maruyama(&brownian(0.7), &mu0, &cfg(10_000, 1.0, 10), 0).unwrap();
        let d = empirical_density(&e, 64, None).unwrap();
        let r = fokker_planck_residual(&d, &brownian(0.7), &test_bank(1)).unwrap();
        assert!(r.max_residual < 2e-2, "{}", r.max_residual);
        assert!(r
            .rows
            .iter()
            .all(|row| row.drift_mass.is_finite() && row.diffusion_mass > 0.0));
    }

    #[test]
    fn boundary_touching_tests_are_skipped() {
        let times = vec![0.0, 1.0];
        let d = EmpiricalDensity::from_masses(1, 4.0, 8, times, vec![0.125; 16]).unwrap();
        let r = fokker_planck_residual(&d, &brownian(0.0), &test_bank(1)).unwrap();
        assert!(r.skipped > 0);
        assert!(r.rows.iter().any(|row| !row.skipped));
    }

    #[test]
    fn pairing_with_one_is_integrated_mass() {
        let g = Grid::new(1, 8.0, 17, 1.0, 4).unwrap();
        let one = SpaceTimeField::constant(g, &[1.0]);
        let times = vec![0.0, 0.5, 1.0];
        let mut masses = vec![0.25; 12];
        masses[8..].iter_mut().for_each(|m| *m = 0.2);
        let d = EmpiricalDensity::from_masses(1, 8.0, 4, times, masses).unwrap();
        let expect = 0.25 * 1.0 + 0.5 * (1.0 + 0.8) / 2.0 * 0.5 / 0.5 * 0.5;
        // trapezoid: 0.25·1 + 0.5·1 + 0.25·0.8
        let trap = 0.25 + 0.5 + 0.25 * 0.8;
        assert!(
            (duality_pairing(&one, &d).unwrap() - trap).abs() < 1e-12,
            "{expect}"
        );
    }

    #[test]
    fn bounded_part_pairing_obeys_exact_bound() {
        let g = Grid::new(1, 4.0, 129, 1.0, 10).unwrap();
        let f = SpaceTimeField::from_fn(g, 1, |t, x, o| {
            o[0] = 3.0 / (0.05 + x[0].abs()).sqrt() * (1.0 + t)
        })
        .unwrap();
        let mu0 = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 0.5,
        };
        let c = FnCoefficients {
            dim: 1,
            half_width: 4.0,
            drift: Box::new(|_, x, o| o[0] = -x[0]),
            diffusion: Box::new(|_, _, o| o[0] = 1.0),
        };
        let e = euler_maruyama(&c, &mu0, &cfg(2000, 1.0, 100), 0).unwrap();
        let d = empirical_density(&e, 32, None).unwrap();
        let cert = duality_check(&f, &d, 4.0, 4.0, mu0.first_moment()).unwrap();
        assert!(cert.passed, "{cert:?}");
        assert!(
            (cert.le_pairing + cert.gt_pairing - cert.pairing).abs()
                <= 1e-9 * cert.pairing.max(1.0)
                || cert.pairing <= cert.le_pairing + cert.gt_pairing
        );
        assert!(cert.empirical_constant.is_finite());
    }

    #[test]
    fn weak_continuity_scales_like_root_dt() {
        let mu0 = InitialLaw::Gaussian {
            mean: vec![0.0],
            std: 0.5,
        };
        let e = euler_maruyama(&brownian(0.0), &mu0, &cfg(10_000, 1.0, 10), 0).unwrap();
        let d = empirical_density(&e, 64, None).unwrap();
        let phi = TestFunction {
            center: vec![0.0],
            scale: 2.0,
            active: true,
        };
        let r = weak_continuity(&d, &phi);
        assert!(r.is_finite() && r < 5.0, "{r}");
        assert!(d.max_adjacent_tv() < 0.1, "{}", d.max_adjacent_tv());
    }
}
