//! Simulation harness: reward streams, baselines, Monte Carlo evaluation of
//! `E[z_K − c·K]`, the one-step deviation check, and result export.

mod baseline;
mod deviation;
mod report;
mod stream;

use thiserror::Error;

pub use baseline::{classical_reservation, run_classical, run_fixed_n, run_reservation, KnownDist};
pub use deviation::{deviation_check, DeviationReport, DeviationSpec, StateCheck};
pub use report::{
    config_hash, evaluate, hindsight_stop, sweep_cost, write_csv, BenchReport, EvalOptions, PolicyReport,
    PolicySpec, RunManifest, Standardization, TableRef, MIN_EPISODES,
};
pub use stream::{make_stream, ExternalStream, StreamKind, StreamSpec, SyntheticStream, DEFAULT_TIMEOUT_SECS};

use crate::hindex::HIndexError;
use crate::numerics::NumericsError;
use crate::policy::PolicyError;
use crate::posterior::PosteriorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid stream: {0}")]
    InvalidStream(String),
    #[error("invalid evaluation options: {0}")]
    InvalidOptions(String),
    #[error("cost must be positive and finite, got {0}")]
    InvalidCost(f64),
    #[error("cannot start sampler `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("policy {policy} failed in episode {episode} after {completed} completed episodes: {source}")]
    Episode {
        policy: String,
        episode: usize,
        completed: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    HIndex(#[from] HIndexError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
