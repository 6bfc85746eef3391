use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("no non-ignored targets to compute a loss over")]
    EmptyLoss,
    #[error("label error: {0}")]
    Label(String),
    #[error("state error: {0}")]
    State(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class.
    ///
    /// | code | class |
    /// |------|-------|
    /// | 2 | configuration / invalid arguments |
    /// | 3 | data, parse, label and evaluation errors |
    /// | 4 | numeric, shape and internal state errors |
    /// | 5 | io, checkpoint format, version and corruption errors |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Label(_) | Error::Eval(_) => 3,
            Error::Numeric(_)
            | Error::Shape(_)
            | Error::EmptyLoss
            | Error::State(_)
            | Error::Oracle(_) => 4,
            Error::Io(_) | Error::Format(_) | Error::Version { .. } | Error::Corrupt(_) => 5,
        }
    }
}
