use vidiff_core::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;

/// A failure reported as one JSON object on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
        }
    }

    /// Missing or unreadable checkpoints exit with their own code.
    pub fn checkpoint(e: Error) -> Self {
        match e {
            Error::MissingPath(_) | Error::Checkpoint { .. } => Self {
                code: EXIT_CHECKPOINT,
                kind: "checkpoint",
                message: e.to_string(),
            },
            other => other.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => return Self::config(e.to_string()),
            Error::TimestepRange { .. } | Error::Contract(_) | Error::Shape(_) => "contract",
            Error::NonFiniteLoss { .. } => "training",
            Error::Empty(_) => "empty",
            Error::MissingPath(_) => "missing_path",
            Error::Checkpoint { .. } => "checkpoint",
            _ => "io",
        };
        Self {
            code: EXIT_FAILURE,
            kind,
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(Error::MissingPath(PathBuf::from("a"))).code, EXIT_FAILURE);
        assert_eq!(CliError::checkpoint(Error::MissingPath(PathBuf::from("a"))).code, EXIT_CHECKPOINT);
        assert_eq!(CliError::checkpoint(Error::Config("x".into())).code, EXIT_CONFIG);
    }

    #[test]
    fn json_is_one_parseable_line() {
        let e = CliError::config("train.stepz: unknown field");
        let text = e.to_json();
        assert!(!text.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["exit_code"], 2);
        assert_eq!(v["error"], "config");
    }
}
