use std::fmt;

use advit::Error;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config = 2,
    Data = 3,
    Numeric = 4,
    Verification = 5,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Library errors by cause: file contents are data errors, numeric
/// breakdowns are numeric errors, everything else is a configuration
/// problem.
pub fn classify(e: Error) -> Failure {
    let kind = match &e {
        Error::NonFinite { .. } | Error::Diverged { .. } => Kind::Numeric,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::Malformed { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Checksum { .. }
        | Error::ShapeMismatch { .. }
        | Error::Io(_) => Kind::Data,
        _ => Kind::Config,
    };
    Failure::new(kind, e.to_string())
}
