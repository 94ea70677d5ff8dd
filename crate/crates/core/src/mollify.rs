//! Spatial mollification with the compactly supported bump `(1 - |x/δ|²)²₊`.
//!
//! Weights are normalized on the grid lattice so that constants are
//! reproduced exactly; values outside the box are obtained by mirror
//! reflection about the boundary nodes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField, MAX_DIM};

/// Unnormalized bump profile evaluated at `r = |x| / δ`.
pub fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let s = 1.0 - r * r;
        s * s
    }
}

/// Lattice offsets and normalized weights of the discrete mollifier.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub offsets: Vec<[isize; MAX_DIM]>,
    pub weights: Vec<f64>,
}

impl Stencil {
    pub fn new(grid: &Grid, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Parameter(format!(
                "mollification scale {delta} must be positive"
            )));
        }
        if delta > grid.half_width() {
            return Err(Error::Parameter(format!(
                "mollification scale {delta} exceeds the domain half-width {}",
                grid.half_width()
            )));
        }
        let d = grid.dim();
        let h = grid.spacing();
        let reach = (delta / h).floor() as isize;
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        let mut idx = [0isize; MAX_DIM];
        let span = (2 * reach + 1) as usize;
        for flat in 0..span.pow(d as u32) {
            let mut rest = flat;
            let mut r2 = 0.0;
            for slot in idx.iter_mut().take(d) {
                *slot = (rest % span) as isize - reach;
                rest /= span;
                let y = *slot as f64 * h;
                r2 += y * y;
            }
            let w = bump(r2.sqrt() / delta);
            if w > 0.0 {
                offsets.push(idx);
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { offsets, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn reflect(i: isize, m: isize) -> usize {
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j > m - 1 {
        j = 2 * (m - 1) - j;
    }
    j.clamp(0, m - 1) as usize
}

/// Convolves every time slice of `field` with the mollifier of radius `delta`.
///
/// Slices identical to their predecessor reuse its result.
pub fn mollify(field: &SpaceTimeField, delta: f64) -> Result<SpaceTimeField> {
    let grid = *field.grid();
    let stencil = Stencil::new(&grid, delta)?;
    let mut out = SpaceTimeField::zeros(grid, field.codim());
    for k in 0..grid.time_steps() {
        if k > 0 && field.slice(k) == field.slice(k - 1) {
            let prev = out.slice(k - 1).to_vec();
            out.slice_mut(k).copy_from_slice(&prev);
            continue;
        }
        let src = field.slice(k);
        mollify_slice(&grid, field.codim(), &stencil, src, out.slice_mut(k));
    }
    Ok(out)
}

pub(crate) fn mollify_slice(
    grid: &Grid,
    codim: usize,
    stencil: &Stencil,
    src: &[f64],
    dst: &mut [f64],
) {
    let d = grid.dim();
    let m = grid.points_per_axis() as isize;
    dst.par_chunks_mut(codim)
        .enumerate()
        .for_each(|(node, out)| {
            let base = grid.multi_index(node);
            out.iter_mut().for_each(|v| *v = 0.0);
            let mut idx = [0usize; MAX_DIM];
            for (off, w) in stencil.offsets.iter().zip(&stencil.weights) {
                for a in 0..d {
                    idx[a] = reflect(base[a] as isize + off[a], m);
                }
                let n = grid.node_index(&idx);
                for (o, v) in out.iter_mut().zip(&src[n * codim..(n + 1) * codim]) {
                    *o += w * v;
                }
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::linear_growth_envelope;
    use proptest::prelude::*;

    fn grid1() -> Grid {
        Grid::new(1, 2.0, 161, 1.0, 2).unwrap()
    }

    #[test]
    fn constants_are_fixed_points() {
        let g = Grid::new(2, 1.0, 17, 1.0, 2).unwrap();
        let f = SpaceTimeField::constant(g, &[2.5, -1.0]);
        let m = mollify(&f, 0.4).unwrap();
        for (a, b) in m.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scale_larger_than_box_is_rejected() {
        let f = SpaceTimeField::zeros(grid1(), 1);
        assert!(mollify(&f, 2.5).is_err());
        assert!(mollify(&f, 0.0).is_err());
    }

    #[test]
    fn scale_below_spacing_is_identity() {
        let g = grid1();
        let f = SpaceTimeField::from_fn(g, 1, |_, x, o| o[0] = x[0].sin()).unwrap();
        let m = mollify(&f, 0.5 * g.spacing()).unwrap();
        assert_eq!(m.values(), f.values());
    }

    /// Brute-force L¹ distance on the grid between the mollified half-space
    /// indicator and the indicator itself.
    #[test]
    fn half_space_indicator_converges_in_l1() {
        let g = grid1();
        let f = SpaceTimeField::from_fn(g, 1, |_, x, o| o[0] = if x[0] >= 0.0 { 1.0 } else { 0.0 })
            .unwrap();
        let h = g.spacing();
        let dist: Vec<f64> = [0.4, 0.2, 0.1]
            .iter()
            .map(|&delta| {
                let m = mollify(&f, delta).unwrap();
                m.slice(0)
                    .iter()
                    .zip(f.slice(0))
                    .map(|(a, b)| (a - b).abs() * h)
                    .sum::<f64>()
            })
            .collect();
        assert!(dist[0] > dist[1] && dist[1] > dist[2], "{dist:?}");
        assert!(dist[2] > 0.0);
    }

    #[test]
    fn envelope_grows_at_most_linearly_in_delta() {
        let g = Grid::new(2, 4.0, 33, 1.0, 2).unwrap();
        let f = SpaceTimeField::from_fn(g, 2, |_, x, o| {
            o[0] = -x[0];
            o[1] = -x[1];
        })
        .unwrap();
        let e0 = linear_growth_envelope(&g, f.slice(0), 2);
        for delta in [0.25, 0.5, 1.0] {
            let m = mollify(&f, delta).unwrap();
            let e = linear_growth_envelope(&g, m.slice(0), 2);
            assert!(e <= e0 + delta + 1e-12, "delta {delta}: {e} vs {e0}");
        }
    }

    fn small_field() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 2 * 12 * 12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn sup_norm_never_increases(vals in small_field(), delta in 0.1f64..1.0) {
            let g = Grid::new(2, 1.0, 12, 1.0, 2).unwrap();
            let f = SpaceTimeField::new(g, 1, vals).unwrap();
            let m = mollify(&f, delta).unwrap();
            let sup_in = f.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let sup_out = m.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!(sup_out <= sup_in + 1e-12);
        }

        #[test]
        fn mollification_is_linear(a in small_field(), b in small_field(),
                                   alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let g = Grid::new(2, 1.0, 12, 1.0, 2).unwrap();
            let f = SpaceTimeField::new(g, 1, a).unwrap();
            let h = SpaceTimeField::new(g, 1, b).unwrap();
            let lhs = mollify(&f.linear_combination(alpha, &h, beta).unwrap(), 0.5).unwrap();
            let rhs = mollify(&f, 0.5).unwrap()
                .linear_combination(alpha, &mollify(&h, 0.5).unwrap(), beta).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
