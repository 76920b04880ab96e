use std::fmt;
use std::path::Path;

/// Failure classes with stable process exit codes.
///
/// | class        | exit |
/// |--------------|------|
/// | other        | 1    |
/// | usage        | 2    |
/// | config       | 3    |
/// | io           | 4    |
/// | parse        | 5    |
/// | non_finite   | 6    |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Other,
    Usage,
    Config,
    Io,
    Parse,
    NonFinite,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Other => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Config => 3,
            ErrorClass::Io => 4,
            ErrorClass::Parse => 5,
            ErrorClass::NonFinite => 6,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorClass::Other => "other",
            ErrorClass::Usage => "usage",
            ErrorClass::Config => "config",
            ErrorClass::Io => "io",
            ErrorClass::Parse => "parse",
            ErrorClass::NonFinite => "non_finite",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Config, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ErrorClass::Io, format!("{}: {err}", path.display()))
    }

    /// The single line printed on stderr.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!("error[{}]: {msg}", self.class.tag())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<enecg::Error> for CliError {
    fn from(e: enecg::Error) -> Self {
        let class = match &e {
            enecg::Error::Usage(_) | enecg::Error::NotApplicable(_) => ErrorClass::Usage,
            enecg::Error::Parse { .. } => ErrorClass::Parse,
            enecg::Error::Io { .. } => ErrorClass::Io,
            enecg::Error::NonFinite(_) => ErrorClass::NonFinite,
            enecg::Error::Dimension(_) => ErrorClass::Other,
        };
        Self::new(class, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
