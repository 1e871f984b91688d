//! Robust federated aggregation by residual-based reweighting.
//!
//! Every parameter column of the submitted models is fitted with a
//! repeated-median line; residuals become per-parameter confidences, extreme
//! values are pulled onto the line, and each model is weighted by its summed
//! confidence. The crate also carries the coordinate-wise baselines, small
//! differentiable models, attack implementations and a deterministic
//! federated simulator.

pub mod aggregation;
pub mod attacks;
pub mod datasets;
pub mod error;
pub mod models;
pub mod robust_regression;
pub mod sim;

pub use aggregation::{
    aggregate, coord_median, coord_repeated_median, fedavg, residual_reweight_aggregate, scalar_global,
    simplified_confidence, trimmed_mean, Aggregate, AggregatorSpec, ConfidenceReport, Estimator, Method,
    ParamMatrix, ScalarEnsemble, Weighting,
};
pub use attacks::{AttackKind, AttackSpec};
pub use datasets::{BackdoorPattern, Dataset, Partition};
pub use error::{Error, Result};
pub use models::{Architecture, EvalResult, FlatModel, TrainConfig};
pub use robust_regression::{IndexedColumn, RegressionLine};
pub use sim::{ExperimentConfig, MetricsRow, Simulation};
