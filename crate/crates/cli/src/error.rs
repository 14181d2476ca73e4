use std::fmt;

use mir_core::MirError;

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const NON_CONVERGENCE: u8 = 3;
    pub const REGIME: u8 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Mir(MirError),
    /// Bad or inconsistent input files and flags.
    Input(String),
    /// Failure to write outputs or other unexpected conditions.
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => exit::INPUT,
            CliError::Internal(_) => exit::INTERNAL,
            CliError::Mir(e) => match e {
                MirError::Regime(_) => exit::REGIME,
                MirError::Singular { .. } | MirError::Numerical(_) | MirError::StudyFailed { .. } => {
                    exit::NON_CONVERGENCE
                }
                _ => exit::INPUT,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Mir(e) => write!(f, "{e}"),
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<MirError> for CliError {
    fn from(e: MirError) -> Self {
        CliError::Mir(e)
    }
}

/// Attach a file name to a library error raised while reading it.
pub fn in_file(path: &std::path::Path) -> impl FnOnce(MirError) -> CliError + '_ {
    move |e| match e {
        MirError::Regime(_) => CliError::Mir(e),
        other => CliError::Input(format!("{}: {other}", path.display())),
    }
}
