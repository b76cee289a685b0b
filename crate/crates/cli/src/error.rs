use tlsr_core::LsrError;

/// CLI failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or paths: exit 2.
    Config(String),
    /// Failure while running a stage: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Maps a core error, prefixing configuration fields with `section`.
    pub fn from_core(section: &str, e: LsrError) -> Self {
        match e {
            LsrError::Config { field, reason } if section.is_empty() => CliError::Config(format!("{field}: {reason}")),
            LsrError::Config { field, reason } => CliError::Config(format!("{section}.{field}: {reason}")),
            LsrError::UnknownPatient(id) => CliError::Config(format!("--patient: unknown patient `{id}`")),
            other => CliError::Runtime(other.to_string()),
        }
    }

    pub fn path(flag: &str, path: &std::path::Path, what: &str) -> Self {
        CliError::Config(format!("{flag}: {what}: {}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LsrError> for CliError {
    fn from(e: LsrError) -> Self {
        CliError::from_core("", e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
