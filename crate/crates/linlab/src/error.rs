use std::fmt;
use std::path::PathBuf;

/// Errors for the experiment, IO and CLI layers. Each variant maps onto one
/// of the process exit codes: checks 1, usage/config 2, IO/data 3.
#[derive(Debug)]
pub enum LabError {
    Core(linlab_core::Error),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Format {
        path: PathBuf,
        detail: String,
        byte_offset: Option<u64>,
    },
    Config(String),
    Divergence {
        step: usize,
    },
    InsufficientData(String),
    CheckFailure(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::CheckFailure(_) | LabError::Divergence { .. } => EXIT_CHECK_FAILURE,
            LabError::Config(_) | LabError::Core(_) => EXIT_USAGE,
            LabError::Io { .. } | LabError::Format { .. } | LabError::InsufficientData(_) => {
                EXIT_IO
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::Core(e) => write!(f, "{e}"),
            LabError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            LabError::Format {
                path,
                detail,
                byte_offset,
            } => match byte_offset {
                Some(off) => write!(
                    f,
                    "format error in {} at byte {off}: {detail}",
                    path.display()
                ),
                None => write!(f, "format error in {}: {detail}", path.display()),
            },
            LabError::Config(msg) => write!(f, "config error: {msg}"),
            LabError::Divergence { step } => {
                write!(f, "training diverged (non-finite loss) at step {step}")
            }
            LabError::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            LabError::CheckFailure(name) => write!(f, "check failed: {name}"),
        }
    }
}

impl std::error::Error for LabError {}

impl From<linlab_core::Error> for LabError {
    fn from(e: linlab_core::Error) -> Self {
        LabError::Core(e)
    }
}
