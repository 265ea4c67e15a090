//! Split-tensor calculus for isometric immersions into products of space
//! forms.
//!
//! The crate models the product `O^{n_1}_{k_1} x ... x O^{n_l}_{k_l}` inside
//! a block pseudo-Euclidean space, evaluates parametrized immersions through
//! a combinator algebra with exact 2-jets, computes the per-factor split
//! tensors of the projections along an immersion together with all of their
//! algebraic and differential identities, constructs and detects the standard
//! example families (slices, products, weighted sums, the diagonal geodesic),
//! tests reduction of codimension, and runs a desk-scale existence and
//! uniqueness round trip: read bundle data off an immersion, check the
//! fundamental equations, reintegrate the flat frame system, and match the
//! result to the original up to an ambient isometry.

pub mod ambient;
pub mod bonnet;
pub mod calculus;
pub mod codim;
pub mod gallery;
pub mod grid;

pub mod error;
pub mod jets;
pub mod report;

pub use error::{GeomError, Result};
