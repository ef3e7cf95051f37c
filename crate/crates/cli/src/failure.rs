use serde::Serialize;

/// A failed command: process exit code plus a message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub code: u8,
    pub message: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config", code: EXIT_CONFIG, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { kind: "numeric", code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { kind: "io", code: EXIT_IO, message: message.into() }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<hessquant::Error> for Failure {
    fn from(e: hessquant::Error) -> Self {
        if e.is_numeric() {
            Failure::numeric(e.to_string())
        } else if e.is_io() {
            Failure::io(e.to_string())
        } else {
            Failure::config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}
