//! Flat parameter vectors, seeded random streams, simplex projection and a
//! finite-difference gradient.

mod finite_diff;
mod params;
mod rng;
mod simplex;

pub use finite_diff::finite_diff_grad;
pub use params::{FlatParams, LayerSpan};
pub(crate) use params::{dot, norm};
pub use rng::{rng_draw_gaussian, streams, RngStream};
pub use simplex::simplex_project;
