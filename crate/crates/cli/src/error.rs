use serde::Serialize;

/// Failure reported on stderr as one JSON object.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// Dotted path of the offending config field.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Schema,
    Usage,
    Io,
    Simulation,
    Report,
}

impl CliError {
    pub fn schema(path: impl Into<String>, message: String) -> Self {
        let path = path.into();
        Self {
            kind: ErrorKind::Schema,
            message,
            path: (!path.is_empty() && path != ".").then_some(path),
        }
    }

    fn plain(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            path: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::plain(ErrorKind::Usage, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::plain(ErrorKind::Io, message)
    }

    pub fn simulation(message: impl Into<String>) -> Self {
        Self::plain(ErrorKind::Simulation, message)
    }

    pub fn report(message: impl Into<String>) -> Self {
        Self::plain(ErrorKind::Report, message)
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Schema | ErrorKind::Usage => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<spinfluor_core::Error> for CliError {
    fn from(e: spinfluor_core::Error) -> Self {
        Self::simulation(e.to_string())
    }
}
