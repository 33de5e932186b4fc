use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid configuration: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value while propagating at t={t} (particle {particle:?})")]
    NonFinite { t: f64, particle: Option<usize> },

    #[error("all particles infeasible at t={t}")]
    AllInfeasible { t: usize, infeasible: Vec<bool> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One problem found while validating a configuration.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("`{}`: {}", x.field, x.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attaches a particle index to propagation failures.
    pub fn with_particle(self, particle: usize) -> Self {
        match self {
            Error::NonFinite { t, .. } => Error::NonFinite {
                t,
                particle: Some(particle),
            },
            other => other,
        }
    }

    /// True for errors caused by the input configuration rather than by the run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Validation(_))
    }

    /// Field-level violations carried by a configuration error.
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            Error::Config { field, message } => vec![Violation {
                field: field.clone(),
                message: message.clone(),
            }],
            Error::Validation(v) => v.clone(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { expected, found })
    }
}
