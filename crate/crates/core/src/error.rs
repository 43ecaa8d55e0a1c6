use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] murmur_nn::NnError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Invalid(String),

    #[error("out-of-domain character {0:?} in text")]
    OutOfDomainChar(char),

    #[error("CTC target infeasible: needs at least {required} frames, emissions have {got}")]
    InfeasibleTarget { required: usize, got: usize },

    #[error("input too short: {got} samples, need at least {required}")]
    InputTooShort { required: usize, got: usize },

    #[error("insufficient corpus: {required} utterances required, {got} available")]
    InsufficientData { required: usize, got: usize },

    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreError>,
    },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Parse {
            what,
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        CoreError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
