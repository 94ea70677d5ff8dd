//! Sample statistics and distances between empirical laws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample used on each side of the energy distance.
pub const ENERGY_SUBSAMPLE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Parameter("moments need at least two samples".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            n: xs.len(),
            mean,
            variance,
        })
    }

    pub fn mean_standard_error(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }

    /// Standard error of the sample variance under a Gaussian law.
    pub fn variance_standard_error(&self) -> f64 {
        self.variance * (2.0 / (self.n as f64 - 1.0)).sqrt()
    }

    /// Half-width of the normal-approximation 95% interval for the mean.
    pub fn half_width_95(&self) -> f64 {
        1.959_963_984_540_054 * self.mean_standard_error()
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Wasserstein-1 distance between two empirical laws on the line,
/// `∫ |F_a − F_b| dx` over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter(
            "Wasserstein distance needs nonempty samples".into(),
        ));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut prev = sa[0].min(sb[0]);
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        prev = next;
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
    }
    Ok(total)
}

fn subsample(points: &[f64], dim: usize, cap: usize) -> Vec<&[f64]> {
    let n = points.len() / dim;
    let stride = n.div_ceil(cap).max(1);
    (0..n)
        .step_by(stride)
        .map(|i| &points[i * dim..(i + 1) * dim])
        .collect()
}

fn mean_pair_distance(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let s: f64 = a
        .par_iter()
        .map(|x| {
            b.iter()
                .map(|y| {
                    x.iter()
                        .zip(y.iter())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    s / (a.len() * b.len()) as f64
}

/// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` (V-statistic) between point
/// clouds stored row-major with `dim` coordinates, each subsampled by a fixed
/// stride to at most [`ENERGY_SUBSAMPLE`] points.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0
        || !a.len().is_multiple_of(dim)
        || !b.len().is_multiple_of(dim)
        || a.is_empty()
        || b.is_empty()
    {
        return Err(Error::Parameter(
            "energy distance needs nonempty point clouds".into(),
        ));
    }
    let sa = subsample(a, dim, ENERGY_SUBSAMPLE);
    let sb = subsample(b, dim, ENERGY_SUBSAMPLE);
    let e = 2.0 * mean_pair_distance(&sa, &sb)
        - mean_pair_distance(&sa, &sa)
        - mean_pair_distance(&sb, &sb);
    Ok(e.max(0.0))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov tail `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2j²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `N(mean, std²)`, with the
/// asymptotic p-value at `(√n + 0.12 + 0.11/√n)·D`.
pub fn ks_test_normal(xs: &[f64], mean: f64, std: f64) -> Result<KsResult> {
    if xs.is_empty() {
        return Err(Error::Parameter("KS test needs samples".into()));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::Parameter(e.to_string()))?;
    let s = sorted(xs);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = dist.cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d),
    })
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut s = NoiseStream::new(seed, 0);
        let mut z = [0.0; 1];
        (0..n)
            .map(|_| {
                s.next_normals(&mut z);
                z[0] + shift
            })
            .collect()
    }

    #[test]
    fn wasserstein_of_identical_samples_is_zero() {
        let a = normals(1, 500, 0.0);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_of_shifted_gaussians_approaches_shift() {
        let errs: Vec<f64> = [1_000, 16_000]
            .iter()
            .map(|&n| (wasserstein1(&normals(1, n, 0.0), &normals(2, n, 0.5)).unwrap() - 0.5).abs())
            .collect();
        assert!(errs[1] < 0.05 && errs[1] < errs[0] + 0.01, "{errs:?}");
    }

    /// Unequal sizes: compare the merged-CDF formula against the quantile
    /// integral evaluated on a common refinement.
    #[test]
    fn wasserstein_unequal_sizes_matches_quantile_formula() {
        let a = [0.0, 1.0, 3.0];
        let b = [0.5, 2.0];
        // quantile functions on [0,1]: a jumps at 1/3, 2/3; b at 1/2
        let qa = |u: f64| -> f64 {
            if u < 1.0 / 3.0 {
                0.0
            } else if u < 2.0 / 3.0 {
                1.0
            } else {
                3.0
            }
        };
        let qb = |u: f64| -> f64 {
            if u < 0.5 {
                0.5
            } else {
                2.0
            }
        };
        let n = 60_000;
        let brute: f64 = (0..n)
            .map(|i| (qa((i as f64 + 0.5) / n as f64) - qb((i as f64 + 0.5) / n as f64)).abs())
            .sum::<f64>()
            / n as f64;
        assert!((wasserstein1(&a, &b).unwrap() - brute).abs() < 1e-4);
    }

    #[test]
    fn energy_distance_is_zero_for_identical_clouds_and_positive_otherwise() {
        let a = normals(3, 400, 0.0);
        assert!(energy_distance(&a, &a, 2).unwrap().abs() < 1e-12);
        let b = normals(4, 400, 1.0);
        assert!(energy_distance(&a, &b, 2).unwrap() > 0.1);
    }

    #[test]
    fn ks_accepts_normals_and_rejects_shifted() {
        let a = normals(5, 10_000, 0.0);
        assert!(ks_test_normal(&a, 0.0, 1.0).unwrap().p_value > 0.01);
        assert!(ks_test_normal(&a, 0.2, 1.0).unwrap().p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1.358) ≈ 0.05, Q(1.628) ≈ 0.01
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 5e-4);
    }

    #[test]
    fn moment_errors() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
    }
}
