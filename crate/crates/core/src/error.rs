use std::path::PathBuf;

use riskdistill_diffcore::TapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?}): {reason}")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
        reason: String,
        history: Box<crate::student::TrainingHistory>,
    },
    #[error("no usable strata for code {code}")]
    NoUsableStrata { code: usize, diagnostics: Vec<String> },
    #[error("explainer for patient {patient_id} hit a non-finite loss at iteration {iteration}")]
    ExplainerAborted {
        patient_id: u64,
        iteration: usize,
        /// Loss of every iteration up to and including the failing one.
        trace: Vec<f64>,
    },
    #[error("stage {stage} needs {} to have run first", required.join(", "))]
    MissingStages { stage: String, required: Vec<String> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
