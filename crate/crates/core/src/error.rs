use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("incompatible model: {0}")]
    IncompatibleModel(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("recall is undefined for an empty reference set")]
    UndefinedRecall,

    #[error(
        "document ids do not align (only in predictions: {only_in_pred:?}; only in references: {only_in_ref:?})"
    )]
    Alignment {
        only_in_pred: Vec<String>,
        only_in_ref: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
