use std::fmt;

/// Process exit codes.
///
/// | code | meaning |
/// |------|---------|
/// | 0 | success |
/// | 1 | internal error (numeric failure, broken invariant) |
/// | 2 | usage error (bad flags) |
/// | 3 | configuration error (config file, scenario, unknown query) |
/// | 4 | engine error |
/// | 5 | I/O error |
/// | 6 | data error (unreadable history, too little data) |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Internal = 1,
    Usage = 2,
    Config = 3,
    Engine = 4,
    Io = 5,
    Data = 6,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ExitKind, error: anyhow::Error) -> Self {
        Self { kind, error }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

impl From<aqetuner_core::Error> for CliError {
    fn from(e: aqetuner_core::Error) -> Self {
        use aqetuner_core::Error as E;
        let kind = match &e {
            E::Config { .. } | E::Validation(_) | E::UnknownQuery(_) => ExitKind::Config,
            E::Engine(_) => ExitKind::Engine,
            E::Io(_) => ExitKind::Io,
            E::Json(_) | E::InsufficientData(_) => ExitKind::Data,
            E::Usage(_) => ExitKind::Usage,
            _ => ExitKind::Internal,
        };
        Self::new(kind, e.into())
    }
}
