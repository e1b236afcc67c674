use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, malformed or semantically invalid configuration.
    #[error("{0}")]
    Config(String),
    /// A cross-check on the produced data failed.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<metrolink_core::ConfigError> for CliError {
    fn from(e: metrolink_core::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 3);
        let io = CliError::Io { context: "writing".into(), source: std::io::Error::other("disk full") };
        assert_eq!(io.exit_code(), 1);
        assert_eq!(io.to_string(), "writing: disk full");
    }
}
