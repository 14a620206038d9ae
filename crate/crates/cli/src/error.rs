//! Exit-code taxonomy and the error type every command returns.

use hiercomp_core::HierError;
use hiercomp_toy::ToyError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitClass {
    /// The analysis ran and its verdict is positive.
    Success,
    /// The analysis ran and its verdict is negative (violations, uncertified
    /// candidates, failed checks, inexact recovery).
    Negative,
    /// Bad arguments, unreadable or malformed inputs, I/O failures.
    Usage,
    /// Numerical breakdown or a bug.
    Internal,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            Self::Success => 0,
            Self::Negative => 1,
            Self::Usage => 2,
            Self::Internal => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub class: ExitClass,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { class: ExitClass::Usage, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { class: ExitClass::Internal, message: message.into() }
    }

    /// Prefixes the message, keeping the class.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        Self { class: self.class, message: format!("{what}: {}", self.message) }
    }
}

fn core_class(e: &HierError) -> ExitClass {
    match e {
        HierError::TestDegenerate(_)
        | HierError::ConstantColumn(_)
        | HierError::UndefinedOverlap
        | HierError::MissingEntry { .. } => ExitClass::Internal,
        _ => ExitClass::Usage,
    }
}

impl From<HierError> for CliError {
    fn from(e: HierError) -> Self {
        Self { class: core_class(&e), message: e.to_string() }
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        let class = match &e {
            ToyError::Core(inner) => core_class(inner),
            ToyError::Diverged { .. } | ToyError::ShapeMismatch(_) => ExitClass::Internal,
            _ => ExitClass::Usage,
        };
        Self { class, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_to_codes() {
        assert_eq!(ExitClass::Success.code(), 0);
        assert_eq!(ExitClass::Negative.code(), 1);
        assert_eq!(ExitClass::Usage.code(), 2);
        assert_eq!(ExitClass::Internal.code(), 3);
    }

    #[test]
    fn errors_are_classified() {
        assert_eq!(CliError::from(HierError::invalid("x")).class, ExitClass::Usage);
        assert_eq!(CliError::from(HierError::ConstantColumn(0)).class, ExitClass::Internal);
        let diverged = ToyError::Diverged { epoch: 1, batch: 0, l_d: f64::NAN, l_n: 0.0 };
        assert_eq!(CliError::from(diverged).class, ExitClass::Internal);
        assert_eq!(CliError::from(ToyError::Core(HierError::invalid("y"))).class, ExitClass::Usage);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(io).class, ExitClass::Usage);
    }
}
