//! Kolmogorov-Arnold network inference over uniform B-spline bases, with
//! post-training integer quantization of the three KAN tensors (weights `W`,
//! activations `A`, B-spline outputs `B`), lookup-table replacements for the
//! Cox-de Boor recursion, an analytic multiplication/BitOps cost model and a
//! bit-width design-space explorer.
//!
//! The crate is organised bottom-up:
//!
//! - [`bspline`]: uniform grids and basis evaluation.
//! - [`model`]: KAN linear/convolutional layers, model composition and the
//!   `KANT` container format.
//! - [`quant`]: uniform affine quantization and range calibration.
//! - [`tabulation`]: the canonical B-spline LUT and per-connection spline tables.
//! - [`cost`]: MUL counts, BitOps, table memory and FPGA LUT estimates.
//! - [`data`], [`train`], [`eval`]: datasets, a small trainer and the
//!   accuracy evaluator for every inference path.
//! - [`explore`]: configuration sweeps, Pareto fronts and report files.

pub mod bspline;
pub mod cost;
pub mod data;
mod error;
pub mod eval;
pub mod explore;
pub mod linalg;
pub mod model;
pub mod quant;
pub mod tabulation;
pub mod train;

pub use bspline::{BasisVector, GridSpec};
pub use cost::{ArchDescriptor, CostReport, LayerSpec};
pub use data::Dataset;
pub use error::{KanError, Result};
pub use eval::{evaluate_accuracy, EvalMode, PreparedModel};
pub use linalg::Matrix;
pub use model::{ConvKanLayer, KanLinearLayer, Layer, Model, Shape};
pub use quant::{ActRangePolicy, QuantConfig, QuantParams, PASSTHROUGH_BITS};
pub use tabulation::{BsplineLut, SplineTableSet, SplineTables};
pub use train::{TrainConfig, TrainReport};

/// Library version
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
