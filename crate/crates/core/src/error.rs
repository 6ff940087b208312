//! Error type shared by every capsule subsystem.
//!
//! Errors cross the enclave boundary as `(code, message)` pairs, so every
//! variant has a stable numeric code and a machine-readable name.

use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("enclave handle not found")]
    HandleNotFound,
    #[error("enclave program failed: {0}")]
    Program(ProgramFailure),
    #[error("malformed program: {0}")]
    MalformedProgram(String),

    #[error("integrity check failed: {0}")]
    IntegrityFailure(String),
    #[error("sealed data belongs to a different enclave identity")]
    IdentityMismatch,
    #[error("sealed blob truncated: {0}")]
    TruncatedBlob(String),
    #[error("sealed chunk out of order: expected {expected}, found {found}")]
    ChunkOutOfOrder { expected: u32, found: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weights do not match model definition: {0}")]
    SchemaError(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("training diverged: {0}")]
    DivergenceError(String),
    #[error("layer working set of {needed} bytes exceeds memory budget of {budget} bytes")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("enclave holds no decryption key; run setup first")]
    NoKey,
    #[error("unknown enclave command {0:?}")]
    UnknownCommand(String),
    #[error("quote verification failed")]
    QuoteInvalid,
    #[error("quote was produced by a different program")]
    TagMismatch,

    #[error("query quota exhausted ({threshold} queries)")]
    QuotaExceeded { threshold: u64 },
    #[error("rollback of guard state detected (state version {presented}, counter {recorded})")]
    RollbackDetected { presented: u64, recorded: u64 },
    #[error("query denied: {0}")]
    Detected(String),
    #[error("ticket signature invalid")]
    BadSignature,
    #[error("ticket already redeemed")]
    TicketReused,
    #[error("ticket was issued for a different query")]
    DigestMismatch,
    #[error("guard storage unavailable: {0}")]
    StorageUnavailable(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol error {code:#06x}: {message}")]
    Protocol { code: u16, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error payload returned by an enclave program step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramFailure {
    pub code: u16,
    pub message: String,
}

impl fmt::Display for ProgramFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#06x}] {}", self.code, self.message)
    }
}

impl Error {
    /// Stable numeric code. Also used on the wire and across the enclave boundary.
    pub fn code(&self) -> u16 {
        match self {
            Error::HandleNotFound => 0x0001,
            Error::Program(_) => 0x0002,
            Error::MalformedProgram(_) => 0x0003,
            Error::IntegrityFailure(_) => 0x0010,
            Error::IdentityMismatch => 0x0011,
            Error::TruncatedBlob(_) => 0x0012,
            Error::ChunkOutOfOrder { .. } => 0x0013,
            Error::ShapeMismatch(_) => 0x0020,
            Error::SchemaError(_) => 0x0021,
            Error::ParseError(_) => 0x0022,
            Error::DivergenceError(_) => 0x0023,
            Error::BudgetExceeded { .. } => 0x0024,
            Error::NoKey => 0x0030,
            Error::UnknownCommand(_) => 0x0031,
            Error::QuoteInvalid => 0x0032,
            Error::TagMismatch => 0x0033,
            Error::QuotaExceeded { .. } => 0x0040,
            Error::RollbackDetected { .. } => 0x0041,
            Error::Detected(_) => 0x0042,
            Error::BadSignature => 0x0043,
            Error::TicketReused => 0x0044,
            Error::DigestMismatch => 0x0045,
            Error::StorageUnavailable(_) => 0x0046,
            Error::DimensionMismatch { .. } => 0x0050,
            Error::InvalidArgument(_) => 0x0051,
            Error::Transport(_) => 0x0060,
            Error::Protocol { .. } => 0x0061,
            Error::Io(_) => 0x0062,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Error::HandleNotFound => "HandleNotFound",
            Error::Program(_) => "ProgramError",
            Error::MalformedProgram(_) => "MalformedProgram",
            Error::IntegrityFailure(_) => "IntegrityFailure",
            Error::IdentityMismatch => "IdentityMismatch",
            Error::TruncatedBlob(_) => "TruncatedBlob",
            Error::ChunkOutOfOrder { .. } => "ChunkOutOfOrder",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SchemaError(_) => "SchemaError",
            Error::ParseError(_) => "ParseError",
            Error::DivergenceError(_) => "DivergenceError",
            Error::BudgetExceeded { .. } => "BudgetExceeded",
            Error::NoKey => "NoKey",
            Error::UnknownCommand(_) => "UnknownCommand",
            Error::QuoteInvalid => "QuoteInvalid",
            Error::TagMismatch => "TagMismatch",
            Error::QuotaExceeded { .. } => "QuotaExceeded",
            Error::RollbackDetected { .. } => "RollbackDetected",
            Error::Detected(_) => "Detected",
            Error::BadSignature => "BadSignature",
            Error::TicketReused => "TicketReused",
            Error::DigestMismatch => "DigestMismatch",
            Error::StorageUnavailable(_) => "StorageUnavailable",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Transport(_) => "Transport",
            Error::Protocol { .. } => "Protocol",
            Error::Io(_) => "Io",
        }
    }

    /// Converts into the payload carried out of an enclave step.
    pub fn into_failure(self) -> ProgramFailure {
        match self {
            Error::Program(f) => f,
            other => ProgramFailure {
                code: other.code(),
                message: encode_detail(&other),
            },
        }
    }

    /// Rebuilds a typed error from an enclave failure payload. Unknown codes
    /// stay wrapped as [`Error::Program`].
    pub fn from_failure(failure: ProgramFailure) -> Error {
        let msg = failure.message.clone();
        let num = |i: usize| -> u64 {
            msg.split(',')
                .nth(i)
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0)
        };
        match failure.code {
            0x0001 => Error::HandleNotFound,
            0x0010 => Error::IntegrityFailure(msg),
            0x0011 => Error::IdentityMismatch,
            0x0012 => Error::TruncatedBlob(msg),
            0x0013 => Error::ChunkOutOfOrder {
                expected: num(0) as u32,
                found: num(1) as u32,
            },
            0x0020 => Error::ShapeMismatch(msg),
            0x0021 => Error::SchemaError(msg),
            0x0022 => Error::ParseError(msg),
            0x0023 => Error::DivergenceError(msg),
            0x0024 => Error::BudgetExceeded {
                needed: num(0) as usize,
                budget: num(1) as usize,
            },
            0x0030 => Error::NoKey,
            0x0031 => Error::UnknownCommand(msg),
            0x0032 => Error::QuoteInvalid,
            0x0033 => Error::TagMismatch,
            0x0040 => Error::QuotaExceeded { threshold: num(0) },
            0x0041 => Error::RollbackDetected {
                presented: num(0),
                recorded: num(1),
            },
            0x0042 => Error::Detected(msg),
            0x0043 => Error::BadSignature,
            0x0044 => Error::TicketReused,
            0x0045 => Error::DigestMismatch,
            0x0046 => Error::StorageUnavailable(msg),
            0x0050 => Error::DimensionMismatch {
                expected: num(0) as usize,
                found: num(1) as usize,
            },
            0x0051 => Error::InvalidArgument(msg),
            _ => Error::Program(failure),
        }
    }
}

// Structured variants carry their numbers as a comma list so they survive
// the trip through `ProgramFailure`.
fn encode_detail(err: &Error) -> String {
    match err {
        Error::ChunkOutOfOrder { expected, found } => format!("{expected},{found}"),
        Error::BudgetExceeded { needed, budget } => format!("{needed},{budget}"),
        Error::QuotaExceeded { threshold } => threshold.to_string(),
        Error::RollbackDetected {
            presented,
            recorded,
        } => format!("{presented},{recorded}"),
        Error::DimensionMismatch { expected, found } => format!("{expected},{found}"),
        Error::IntegrityFailure(m)
        | Error::TruncatedBlob(m)
        | Error::ShapeMismatch(m)
        | Error::SchemaError(m)
        | Error::ParseError(m)
        | Error::DivergenceError(m)
        | Error::UnknownCommand(m)
        | Error::Detected(m)
        | Error::StorageUnavailable(m)
        | Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_roundtrip_preserves_kind() {
        let cases = vec![
            Error::QuotaExceeded { threshold: 3 },
            Error::RollbackDetected {
                presented: 4,
                recorded: 9,
            },
            Error::ChunkOutOfOrder {
                expected: 1,
                found: 0,
            },
            Error::NoKey,
            Error::IntegrityFailure("tag".into()),
            Error::ShapeMismatch("x".into()),
        ];
        for err in cases {
            let code = err.code();
            let name = err.name();
            let shown = err.to_string();
            let back = Error::from_failure(err.into_failure());
            assert_eq!(back.code(), code);
            assert_eq!(back.name(), name);
            assert_eq!(back.to_string(), shown);
        }
    }

    #[test]
    fn unknown_code_stays_program_error() {
        let f = ProgramFailure {
            code: 0x7777,
            message: "custom".into(),
        };
        match Error::from_failure(f.clone()) {
            Error::Program(inner) => assert_eq!(inner, f),
            other => panic!("unexpected {other:?}"),
        }
    }
}
