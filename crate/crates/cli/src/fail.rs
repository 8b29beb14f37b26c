//! Command failures carry a stable code printed as `error[CODE]: message`.

use std::fmt;

#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
}

pub type Outcome<T> = Result<T, Failure>;

impl Failure {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new("E_IO", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    /// Always a single line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        write!(f, "error[{}]: {}", self.code, flat.join(" | "))
    }
}

impl From<sbg_core::Error> for Failure {
    fn from(e: sbg_core::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}
