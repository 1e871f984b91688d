//! Federated simulation harness: experiment configs, rounds, metrics CSV,
//! parameter sweeps, the offline update-file mode and the estimator bound
//! experiment.

mod bound;
mod config;
mod runner;
mod update_file;

use std::path::Path;

pub use bound::{bound_experiment, write_bound, BoundConfig, BoundRow};
pub use config::{DataSource, DatasetSpec, ExperimentConfig, LoadedData, ModelSpec, PartitionSpec};
pub use runner::{
    run_experiment, sweep, write_metrics, write_metrics_file, write_sweep, MetricsRow, RoundOutput, Simulation,
    SweepGrid, SweepRow, CSV_HEADER,
};
pub use update_file::{decode, encode, read_update_file, write_update_file, MAGIC};

use crate::aggregation::{aggregate, Aggregate, AggregatorSpec, ParamMatrix};
use crate::error::Result;

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(round, participant, salt)` under a master seed.
pub fn derive_seed(master: u64, round: u64, participant: u64, salt: u64) -> u64 {
    mix64(mix64(mix64(mix64(master) ^ round) ^ participant) ^ salt)
}

/// Aggregates the matrix stored at `input` and writes the result as a
/// one-row update file.
pub fn aggregate_file(input: &Path, spec: &AggregatorSpec, output: &Path) -> Result<Aggregate> {
    let m = read_update_file(input)?;
    let agg = aggregate(&m, spec)?;
    let out = ParamMatrix::new(1, agg.global.len(), agg.global.clone())?;
    write_update_file(output, &out)?;
    Ok(agg)
}
