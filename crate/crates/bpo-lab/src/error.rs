//! The error type shared by every harness module.

use std::io;
use std::path::PathBuf;

/// Errors from configuration, orchestration, and artifact handling.
///
/// Core-library errors pass through transparently; filesystem errors carry
/// the offending path, because "No such file or directory" without one is
/// useless in a multi-artifact run directory.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// The configuration document failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),
    /// A filesystem operation failed.
    #[error("{path}: {source}")]
    Io {
        /// The path being touched.
        path: PathBuf,
        /// The underlying failure.
        #[source]
        source: io::Error,
    },
    /// The run directory is already owned by another run.
    #[error("run directory {0} is locked by another run (remove .lock to reclaim)")]
    Locked(PathBuf),
    /// No output directory was given by flag, config, or environment.
    #[error("no output directory: pass --out, set output_dir in the config, or export BPO_OUT_ROOT")]
    NoOutputDir,
    /// An artifact a stage depends on is missing from the run directory.
    #[error("missing {what}: {path}")]
    MissingArtifact {
        /// What the artifact is, in plain words.
        what: &'static str,
        /// Where it was expected.
        path: PathBuf,
    },
    /// A corpus line failed to parse.
    #[error("corpus line {line}: {reason}")]
    Corpus {
        /// 1-based line number.
        line: usize,
        /// What was wrong with it.
        reason: String,
    },
    /// A metrics line failed to parse or broke stream ordering.
    #[error("metrics line {line}: {reason}")]
    Metrics {
        /// 1-based line number.
        line: usize,
        /// What was wrong with it.
        reason: String,
    },
    /// The metrics stream holds no training steps, so there is nothing to
    /// report.
    #[error("metrics stream holds no training steps")]
    NoRlMetrics,
    /// Rejection sampling could not find a held-out task outside the
    /// training corpus within its retry budget.
    #[error("could not sample a {stratum} suite task disjoint from the corpus in {attempts} attempts")]
    SuiteExhausted {
        /// Which stratum was being filled.
        stratum: &'static str,
        /// The exhausted retry budget.
        attempts: usize,
    },
    /// A held-out evaluation task turned out to be in the training corpus.
    #[error("evaluation task {0:?} appears in the training corpus")]
    SuiteOverlap(String),
    /// Task-environment error.
    #[error(transparent)]
    Task(#[from] bpo_core::task::TaskError),
    /// Policy error.
    #[error(transparent)]
    Policy(#[from] bpo_core::policy::PolicyError),
    /// Checkpoint codec error.
    #[error(transparent)]
    Checkpoint(#[from] bpo_core::checkpoint::CheckpointError),
    /// Rollout error.
    #[error(transparent)]
    Rollout(#[from] bpo_core::rollout::RolloutError),
    /// Curation or supervised-training error.
    #[error(transparent)]
    Anneal(#[from] bpo_core::anneal::AnnealError),
    /// Reinforcement-learning error.
    #[error(transparent)]
    Optim(#[from] bpo_core::optim::OptimError),
    /// Evaluation error.
    #[error(transparent)]
    Eval(#[from] bpo_core::eval::EvalError),
    /// JSON encoding or decoding of an artifact failed.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Wraps an [`io::Error`] with the path it happened at, for `map_err`.
pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
