use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Electrode {
    Positive,
    Negative,
}

impl fmt::Display for Electrode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Electrode::Positive => f.write_str("positive"),
            Electrode::Negative => f.write_str("negative"),
        }
    }
}

/// One failed check while validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {what}: {value} is outside the admissible range")]
    Domain { what: &'static str, value: f64 },

    #[error("singularity in {what} (value {value})")]
    Singularity { what: &'static str, value: f64 },

    #[error("{electrode} surface concentration {value} mol/m^3 outside (0, c_max)")]
    Saturation { electrode: Electrode, value: f64 },

    #[error("model validity: {0}")]
    ModelValidity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n{}", join_fields(.0))]
    Invalid(Vec<FieldError>),

    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("P2D plant requires Supporting-Information parameters: {0}")]
    MissingP2dParameters(String),

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("at t = {time} s: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("perturbed simulation for parameter {index} failed: {source}")]
    Perturbation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("experiment carries no information (Fisher matrix is identically zero)")]
    Noninformative,

    #[error("infeasible design start: {0}")]
    Infeasible(String),

    #[error("safety window violated at t = {time} s: V = {voltage} V")]
    Safety { time: f64, voltage: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn at_time(self, time: f64) -> Self {
        Error::AtTime {
            time,
            source: Box::new(self),
        }
    }

    /// Strips the context wrappers and returns the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. }
            | Error::Perturbation { source, .. }
            | Error::Block { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_)
            | Error::Invalid(_)
            | Error::Parse { .. }
            | Error::MissingP2dParameters(_)
            | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
