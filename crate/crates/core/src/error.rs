use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("unknown teacher `{name}`: {reason}")]
    UnknownTeacher { name: String, reason: String },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("dataset files missing: expected {format} at {path}")]
    MissingData { path: PathBuf, format: String },

    #[error("empty {0} buffer")]
    EmptyBuffer(&'static str),

    #[error("unknown attack `{name}`; registered providers: [{registered}]")]
    UnknownAttack { name: String, registered: String },

    #[error("attack produced invalid output for item {index}: {reason}")]
    InvalidAdversarial { index: usize, reason: String },

    #[error("non-finite gradient at batch item {0}")]
    NonFiniteGradient(usize),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite output at stage {0}")]
    NonFiniteStage(usize),

    #[error("non-finite policy head output at stage {0}")]
    NonFinitePolicy(usize),

    #[error("invalid probability {0}; expected a value strictly inside (0, 1)")]
    InvalidProbability(f64),

    #[error("teacher accuracy is zero; reward normalization undefined")]
    ZeroTeacherAccuracy,

    #[error("non-finite policy gradient at step {0}")]
    NonFinitePolicyGradient(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },

    #[error("run directory {0} already exists (pass --force to overwrite)")]
    RunExists(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
