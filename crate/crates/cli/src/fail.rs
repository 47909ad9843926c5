use std::fmt::Display;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Display) -> Self {
        Failure { code: USAGE, error: anyhow::anyhow!("{msg}") }
    }

    pub fn data(msg: impl Display) -> Self {
        Failure { code: DATA, error: anyhow::anyhow!("{msg}") }
    }
}

/// Anything not classified at the call site is treated as a data error.
impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: DATA, error: e.into() }
    }
}

pub trait Classify<T> {
    fn or_usage(self, what: &str) -> Result<T, Failure>;
    fn or_data(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_usage(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: USAGE, error: e.into().context(what.to_owned()) })
    }

    fn or_data(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: DATA, error: e.into().context(what.to_owned()) })
    }
}
