use nbmix_core::NbmixError;
use serde_json::json;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// `row` and `col` are 1-based positions in the input file.
    #[error("{path}: row {row}, column {col}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },
    #[error("{0}")]
    Config(String),
    /// An error raised by one of the library modules, tagged with its origin.
    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: NbmixError,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            Self::Core { module, .. } => module,
            _ => "cli",
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Config(_) => "config",
            Self::Core { source, .. } => source.kind(),
        }
    }

    /// Single-line JSON object written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "module": self.module(),
            "kind": self.kind(),
            "message": self.to_string(),
        });
        if let Self::Parse { row, col, .. } = self {
            body["row"] = json!(row);
            body["col"] = json!(col);
        }
        json!({ "error": body })
    }
}

/// Tags library errors with the module they came from.
pub(crate) trait InModule<T> {
    fn in_module(self, module: &'static str) -> CliResult<T>;
}

impl<T> InModule<T> for nbmix_core::Result<T> {
    fn in_module(self, module: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Core { module, source })
    }
}
