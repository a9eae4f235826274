//! Exit codes and the machine-readable error line written to stderr.

use std::fmt;
use std::process::ExitCode;

use serde::Serialize;
use xfr_core::bundle::BundleError;
use xfr_core::eval::EvalError;
use xfr_core::scorer::ScorerError;
use xfr_core::ComputeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Validation,
    Compute,
    Scorer,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Validation => 2,
            Kind::Compute => 3,
            Kind::Scorer => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl fmt::Display) -> Self {
        Failure {
            kind: Kind::Validation,
            message: message.to_string(),
        }
    }

    pub fn compute(message: impl fmt::Display) -> Self {
        Failure {
            kind: Kind::Compute,
            message: message.to_string(),
        }
    }

    /// Writes the error as one JSON line on stderr and returns its exit code.
    pub fn report(&self) -> ExitCode {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            kind: Kind,
            exit_code: u8,
        }
        let line = Line {
            error: &self.message,
            kind: self.kind,
            exit_code: self.kind.exit_code(),
        };
        eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
        ExitCode::from(self.kind.exit_code())
    }
}

/// Bad arguments are validation failures; numerical trouble is a compute
/// failure.
pub fn compute_kind(err: &ComputeError) -> Kind {
    match err {
        ComputeError::Shape(_) | ComputeError::NonFinite(_) => Kind::Compute,
        _ => Kind::Validation,
    }
}

impl From<ComputeError> for Failure {
    fn from(err: ComputeError) -> Self {
        Failure {
            kind: compute_kind(&err),
            message: err.to_string(),
        }
    }
}

impl From<BundleError> for Failure {
    fn from(err: BundleError) -> Self {
        Failure::validation(err)
    }
}

impl From<ScorerError> for Failure {
    fn from(err: ScorerError) -> Self {
        Failure {
            kind: Kind::Scorer,
            message: err.to_string(),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(err: EvalError) -> Self {
        let kind = match &err {
            e if e.is_scorer_failure() => Kind::Scorer,
            EvalError::NoBundles(_) | EvalError::Bundle { .. } => Kind::Validation,
            EvalError::Compute { source, .. } => compute_kind(source),
            _ => Kind::Compute,
        };
        Failure {
            kind,
            message: err.to_string(),
        }
    }
}
