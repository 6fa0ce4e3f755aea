use std::process::ExitCode;

use serde::Serialize;

/// A failed run: exit code plus the one-line JSON written to stderr.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub error: &'static str,
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(error: &'static str, code: u8, message: impl Into<String>) -> Self {
        Failure {
            error,
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Failure::new("invalid-input", 2, message)
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        Failure::new("non-convergence", 4, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Failure::new("internal", 1, message)
    }

    /// Any failure while reading an input counts as invalid input.
    pub fn input(e: qprepair::Error) -> Self {
        match Failure::from(e) {
            f if f.code == 1 => Failure::invalid(f.message),
            f => f,
        }
    }

    pub fn report(&self) -> ExitCode {
        let line = serde_json::to_string(self)
            .unwrap_or_else(|_| format!("{{\"error\":\"internal\",\"code\":1,\"message\":{:?}}}", self.message));
        eprintln!("{line}");
        ExitCode::from(self.code)
    }
}

impl From<qprepair::Error> for Failure {
    fn from(e: qprepair::Error) -> Self {
        use qprepair::Error as E;
        let message = e.to_string();
        match e {
            E::InvalidArgument(_) | E::Bundle(_) | E::GenerationFailure(_) => Failure::invalid(message),
            E::InfeasibleRepair { .. } => Failure::new("qp-infeasible", 3, message),
            E::Refused(_) => Failure::not_converged(message),
            E::NumericFailure { .. } => Failure::new("numeric-failure", 5, message),
            E::InternalInvariant(_) => Failure::internal(message),
            E::Io { .. } => Failure::new("io", 1, message),
        }
    }
}
