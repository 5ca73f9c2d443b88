use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration failed at node {node:?}, stage {stage}: {reason}")]
    Integration {
        node: Option<usize>,
        stage: usize,
        reason: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("QP solve failed: {0}")]
    Qp(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn at_node(self, k: usize) -> Self {
        match self {
            Error::Integration { stage, reason, .. } => Error::Integration {
                node: Some(k),
                stage,
                reason,
            },
            other => other,
        }
    }
}
