//! Counter-based Gaussian noise keyed by `(master seed, path, step)`.
//!
//! Every path owns the ChaCha stream numbered by its index; step `k` starts
//! at word `k · WORDS_PER_STEP` of that stream, so any increment can be
//! regenerated without replaying the ones before it.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::grid::MAX_DIM;

/// Normal pairs drawn per step, enough for `MAX_DIM` components.
const PAIRS_PER_STEP: usize = MAX_DIM.div_ceil(2);
/// 32-bit words consumed per step: two `u64` per Box–Muller pair.
pub const WORDS_PER_STEP: u128 = (PAIRS_PER_STEP * 4) as u128;

const INITIAL_LAW_SALT: u64 = 0x6a09_e667_f3bc_c909;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform on `(0, 1]`.
fn open_unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `[0, 1)`.
fn half_open_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = open_unit(rng.next_u64());
    let u2 = half_open_unit(rng.next_u64());
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Gaussian increments of one path.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    step: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(path);
        rng.set_word_pos(0);
        Self { rng, step: 0 }
    }

    /// Repositions the stream at the start of `step`.
    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        self.step = step;
    }

    /// Fills `out` (`len ≤ MAX_DIM`) with the standard normals of the current
    /// step and advances to the next one.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        debug_assert!(out.len() <= MAX_DIM);
        let mut buf = [0.0; 2 * PAIRS_PER_STEP];
        for p in 0..PAIRS_PER_STEP {
            let (a, b) = box_muller(&mut self.rng);
            buf[2 * p] = a;
            buf[2 * p + 1] = b;
        }
        out.copy_from_slice(&buf[..out.len()]);
        self.step += 1;
    }

    /// Normals of an arbitrary step; leaves the stream positioned after it.
    pub fn normals_at(&mut self, step: u64, out: &mut [f64]) {
        self.seek(step);
        self.next_normals(out);
    }
}

/// Independent generator for initial positions, keyed apart from the noise.
pub fn initial_law_rng(master_seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ INITIAL_LAW_SALT));
    rng.set_stream(path);
    rng
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    box_muller(rng).0
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    half_open_unit(rng.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential_draws() {
        let mut seq = NoiseStream::new(42, 17);
        let mut all = Vec::new();
        for _ in 0..50 {
            let mut z = [0.0; 3];
            seq.next_normals(&mut z);
            all.push(z);
        }
        let mut ra = NoiseStream::new(42, 17);
        for k in [49u64, 0, 23, 7] {
            let mut z = [0.0; 3];
            ra.normals_at(k, &mut z);
            assert_eq!(z, all[k as usize]);
        }
    }

    #[test]
    fn lower_dimensions_read_a_prefix() {
        let mut a = NoiseStream::new(1, 2);
        let mut b = NoiseStream::new(1, 2);
        let mut z1 = [0.0; 1];
        let mut z3 = [0.0; 3];
        for _ in 0..10 {
            a.next_normals(&mut z1);
            b.next_normals(&mut z3);
            assert_eq!(z1[0], z3[0]);
        }
    }

    #[test]
    fn streams_differ_across_paths_and_seeds() {
        let mut z = [[0.0; 2]; 3];
        NoiseStream::new(5, 0).next_normals(&mut z[0]);
        NoiseStream::new(5, 1).next_normals(&mut z[1]);
        NoiseStream::new(6, 0).next_normals(&mut z[2]);
        assert_ne!(z[0], z[1]);
        assert_ne!(z[0], z[2]);
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut s = NoiseStream::new(9, 0);
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        let mut z = [0.0; 2];
        for _ in 0..n / 2 {
            s.next_normals(&mut z);
            for v in z {
                m1 += v;
                m2 += v * v;
            }
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }
}
