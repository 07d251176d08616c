//! Split and neighborhood conformal prediction on precomputed model
//! outputs.
//!
//! The crate turns a file of embeddings, model outputs, and labels into
//! classification prediction sets or regression intervals with a marginal
//! coverage target. Split conformal calibration fixes one global score
//! threshold; neighborhood calibration weighs calibration examples by
//! embedding proximity (ball, k-NN exponential, or all-point exponential
//! kernels), re-solves the significance level on a lossless `1/n` grid, and
//! takes a weighted score quantile per test input. An evaluation harness
//! runs seeded multi-trial comparisons and hyperparameter grids, and a
//! diagnostics module estimates the clustering quantities (silhouette,
//! separation, concentration) that predict when localization shrinks
//! prediction sets.
//!
//! All numeric kernels are generic over the scalar type via [`num::Real`]
//! (`f64` and `f32` both work); the `*64` aliases below pin the common
//! `f64` instantiation. Randomness is drawn in `f64` from per-component
//! seeded streams, so results are reproducible and independent of batch
//! order or thread scheduling.

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod localizer;
pub mod num;
pub mod quantile;
pub mod scoring;
pub mod seeding;
pub mod types;

pub use error::{Error, Result};
pub use num::Real;

/// `f64` instantiations of the core generic types.
pub type Dataset64 = types::Dataset<f64>;
pub type LabeledExample64 = types::LabeledExample<f64>;
pub type ScoreVector64 = types::ScoreVector<f64>;
pub type WeightVector64 = types::WeightVector<f64>;
pub type QuantileResult64 = quantile::QuantileResult<f64>;
pub type Threshold64 = quantile::Threshold<f64>;
pub type CalibratedModel64 = engine::CalibratedModel<f64>;
pub type PredictionOutput64 = engine::PredictionOutput<f64>;
pub type NeighborIndex64 = localizer::NeighborIndex<f64>;
pub type TemperatureFit64 = scoring::TemperatureFit<f64>;

/// `f32` counterparts for memory-constrained embedding sets.
pub type Dataset32 = types::Dataset<f32>;
pub type LabeledExample32 = types::LabeledExample<f32>;
pub type ScoreVector32 = types::ScoreVector<f32>;
pub type WeightVector32 = types::WeightVector<f32>;
