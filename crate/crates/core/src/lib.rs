//! Sparse projection-posterior regression.
//!
//! Conjugate ridge posterior draws are pushed through an ℓ₁-penalized
//! projection to give sparse draws, optionally debiased with nodewise
//! LASSO residuals. All computation after data loading runs on the
//! sufficient statistics `(XᵀX, XᵀY, YᵀY, n)`, which can be computed per
//! shard and merged.

pub mod debias;
pub mod design;
pub mod error;
pub mod inference;
pub mod pipeline;
pub mod posterior;
pub mod projection;
pub mod rng;
pub mod stats;
pub mod util;

pub use debias::{CredibleInterval, DebiasMap, IntervalKind, NodewiseFit};
pub use design::{CsvOptions, Dataset, NoiseKind, SimConfig};
pub use error::{Result, SpjError};
pub use inference::{EllipsoidRegion, Metrics, SelectionResult};
pub use pipeline::{LambdaChoice, RunConfig, RunReport, SimulationReport};
pub use posterior::{PosteriorDraw, RidgePosterior, SigmaImmersion};
pub use projection::{KktReport, ProjectedDraws, ProjectionConfig, SparseVector};
pub use rng::Substreams;
pub use stats::{MergedStats, ShardStats};
