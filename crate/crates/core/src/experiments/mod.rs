//! Experiment protocols: training to convergence, output fluctuation,
//! validation, and multi-run aggregation.

mod cifar;
mod convergence;
mod fluctuation;
mod report;
mod spiral;

use serde::{Deserialize, Serialize};

use crate::network::NormKind;

pub use cifar::{run_cifar_once, run_cifar_suite, CifarConfig, CifarRunResult, EpochPoint};
pub use convergence::{detect_convergence, ConvergenceDetector};
pub use fluctuation::{fluctuation, grid_sites, kl_divergence, PROB_FLOOR};
pub use report::{
    aggregate, fmt_sig9, read_runs_csv, write_metadata, write_runs_csv, write_table_csv,
    CellSummary, Metric, RunRow, RUN_COLUMNS,
};
pub use spiral::{
    measure_fluctuation, run_spiral_once, run_spiral_suite, run_spiral_suite_on, SpiralConfig,
    SpiralRunResult,
};

/// Outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Training produced a non-finite value or a degenerate σ.
    Diverged {
        batch: usize,
        reason: String,
    },
    /// The configuration cannot be trained, e.g. batch statistics over a
    /// single instance.
    Inapplicable,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Inapplicable => "inapplicable",
        }
    }
}

/// Mixes `tags` into `base` (SplitMix64 finalizer per word), so every run
/// gets a seed that depends only on its identity.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Batch-statistics layers need more than one instance per batch.
pub fn is_applicable(norm: NormKind, batch_size: usize) -> bool {
    !(norm.uses_batch_stats() && batch_size < 2)
}
