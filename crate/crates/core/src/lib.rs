//! Numerical laboratory for SDEs with singular drifts.

// `!(x > 0.0)` rejects NaN; index loops mirror the stencil formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coefficients;
pub mod config;
pub mod decomposition;
pub mod density;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod mollify;
pub mod norms;
pub mod pipeline;
pub mod presets;
pub mod rng;
pub mod simulation;
pub mod stats;
pub mod transform;
pub mod zvonkin;

pub use error::{Error, Result};
pub use grid::{Grid, SpaceTimeField};
