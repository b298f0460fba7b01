//! Experiment orchestration: training ensembles, clean and attacked
//! analyses, replicate aggregation and the figure tables.

mod aggregate;
mod analysis;
mod config;
mod figures;
mod output;
mod training;

use thiserror::Error;

pub use aggregate::{aggregate, aggregate_cells, Aggregate, AggregateRow, CellResult, Condition, SpectrumStats};
pub use analysis::{
    clean_spectra, effective_n, evaluate_member, run_attack_sweep, run_clean_analysis, run_dimensionality_comparison,
    stimulus_ids, theory_curve, Analysis, ConditionGrid, DimensionalityComparison, EffectiveNFit, LayerSpectrum, TheoryRow,
};
pub use config::{default_epsilon_grid, DimensionalitySettings, ExperimentConfig, ReplicateSeeds, SpectrumSettings};
pub use figures::{
    accuracy_alpha_fits, reproduce, save_checkpoints, write_alpha_fits, AccuracyAlphaFit, Figure, RunContext,
};
pub use output::{
    write_aggregates, write_cells, write_curves, write_dimensionality_points, write_effective_n, write_spectra,
    write_spectrum_fits, write_sweep, write_theory, write_training_summary, write_width_aggregates, Manifest,
    OutputFile, Table, SWEEP_COLUMNS,
};
pub use training::{
    checkpoint_meta, replicate_cache_key, run_training, train_replicate, CurveRow, Datasets, Ensemble, Member,
    TrainingOutcome,
};

use crate::attacks::AttackError;
use crate::data::DataError;
use crate::manifold::ManifoldError;
use crate::network::NetworkError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("replicate {replicate}: {cause}")]
    Divergence { replicate: usize, cause: NetworkError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("cannot aggregate zero values")]
    EmptyAggregate,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit codes of the command-line tool.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
}

impl HarnessError {
    /// 2 for dataset problems, 3 for numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Data(_) | HarnessError::Network(NetworkError::Data(_)) => exit_code::DATA,
            HarnessError::Divergence { .. }
            | HarnessError::Network(NetworkError::Divergence { .. })
            | HarnessError::Attack(AttackError::Network(NetworkError::Divergence { .. })) => exit_code::DIVERGENCE,
            _ => exit_code::USAGE,
        }
    }
}
