use hiercomp_core::HierError;
use thiserror::Error;

pub type Result<T, E = ToyError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("unknown concept id {id} (scene defines {defined})")]
    UnknownConcept { id: usize, defined: usize },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: L_d = {l_d}, L_n = {l_n}")]
    Diverged { epoch: usize, batch: usize, l_d: f64, l_n: f64 },

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Core(#[from] HierError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
