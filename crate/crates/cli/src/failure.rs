use std::fmt;

use tiil_core::Error;

/// A command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Backend(String),
    Data(String),
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Data(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Backend(m) | Failure::Data(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::Backend(_) | Error::NotDifferentiable => Failure::Backend(e.to_string()),
            Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::MissingPredictions(_) => {
                Failure::Data(e.to_string())
            }
            Error::InvalidConfig(_) | Error::UnknownAxis(_) | Error::EmptyText => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

pub fn write_json(path: &std::path::Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}
