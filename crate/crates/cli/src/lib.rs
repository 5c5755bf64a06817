pub mod commands;
pub mod config;

use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const MODEL: i32 = 3;
    pub const ALIGNMENT: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self {
            code: exit::INPUT,
            message: msg.into(),
        }
    }

    pub fn model(msg: impl Into<String>) -> Self {
        Self {
            code: exit::MODEL,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<topicner::Error> for CliError {
    fn from(e: topicner::Error) -> Self {
        use topicner::Error as E;
        let code = match &e {
            E::InvalidInput(_) | E::Io(_) | E::Json(_) | E::UndefinedRecall => exit::INPUT,
            E::IncompatibleModel(_) => exit::MODEL,
            E::Alignment { .. } => exit::ALIGNMENT,
            E::InvalidState(_) | E::TrainingDiverged { .. } => exit::FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}
