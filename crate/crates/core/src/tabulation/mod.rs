//! Precomputed tables replacing B-spline evaluation.
//!
//! Two schemes live here. [`BsplineLut`] stores half of one canonical basis
//! function and serves every basis function of every layer by translation
//! and symmetry. [`SplineTables`] sample each learned activation `φ_ij`
//! directly, turning a layer into lookups and integer additions.

mod lut;
mod spline;

pub use lut::{build_bspline_lut, fake_quant_weights, lut_basis_lookup, lut_basis_matrix, tabulated_kan_forward, BsplineLut, KnotLattice, LutBasis};
pub use spline::{build_spline_tables, spline_table_forward, SplineTableSet, SplineTables};
