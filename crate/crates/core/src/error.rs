use thiserror::Error;

pub type Result<T, E = HierError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HierError {
    #[error("parse error{}: {message}", location(*line, field.as_deref()))]
    Parse { line: Option<usize>, field: Option<String>, message: String },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid combination: {0}")]
    InvalidCombination(String),

    #[error("model does not validate:\n{0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("missing support-table entry for {variables} under {combination}")]
    MissingEntry { variables: String, combination: String },

    #[error("unsupported family for {variable}: {reason}")]
    UnsupportedFamily { variable: String, reason: String },

    #[error("degenerate test: {0}")]
    TestDegenerate(String),

    #[error("insufficient samples: need {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("undefined correlation: column {0} is constant")]
    ConstantColumn(usize),

    #[error("dimension deficit: {0}")]
    DimensionDeficit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("undefined overlap: both maps are zero")]
    UndefinedOverlap,

    #[error("models are not comparable: {0}")]
    NotComparable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HierError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub fn parse(line: Option<usize>, field: Option<&str>, message: impl Into<String>) -> Self {
        Self::Parse { line, field: field.map(str::to_string), message: message.into() }
    }
}

fn location(line: Option<usize>, field: Option<&str>) -> String {
    match (line, field) {
        (Some(l), Some(f)) => format!(" at line {l}, field `{f}`"),
        (Some(l), None) => format!(" at line {l}"),
        (None, Some(f)) => format!(" in field `{f}`"),
        (None, None) => String::new(),
    }
}
