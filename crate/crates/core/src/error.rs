use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input outside its domain: {0}")]
    InputDomain(String),

    #[error("cannot stratify: class {class} has {count} sample(s), need at least 2")]
    Stratification { class: u8, count: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dice denominator is degenerate: every class weight is zero")]
    DegenerateWeights,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("RPL round {round}: {source}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble member {member}: {source}")]
    MemberFailed {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("kappa is undefined: expected-disagreement denominator is zero")]
    UndefinedKappa,

    #[error("no class has both positive and negative samples; AUC is undefined")]
    NoEvaluableClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("kernel size must be odd and >= 1, got {0}")]
    EvenKernel(usize),

    #[error("expected a square raster, got {width}x{height}")]
    NonSquare { width: usize, height: usize },

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics (divergence, undefined metrics) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Diverged { .. }
            | Error::UndefinedKappa
            | Error::NoEvaluableClass
            | Error::DegenerateWeights => true,
            Error::RoundFailed { source, .. } | Error::MemberFailed { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}
