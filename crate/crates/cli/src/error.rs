use std::fmt;

use serde::Serialize;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// A failure reported as one JSON object on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> CliError {
        CliError {
            kind: "bad_input",
            message: message.into(),
            exit_code: EXIT_INPUT,
        }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            kind: "runtime_failure",
            message: message.into(),
            exit_code: EXIT_RUNTIME,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", self.message))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<terraseg::Error> for CliError {
    fn from(e: terraseg::Error) -> CliError {
        if e.is_input_error() {
            CliError::input(e.to_string())
        } else {
            CliError::runtime(e.to_string())
        }
    }
}
