use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_THRESHOLD: u8 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, source: e.into() }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_DATA, source: e.into() }
    }

    pub fn threshold(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_THRESHOLD, source: e.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut shown = self.source.to_string();
        f.write_str(&shown)?;
        for cause in self.source.chain().skip(1) {
            let msg = cause.to_string();
            if !shown.contains(&msg) {
                write!(f, ": {msg}")?;
                shown = msg;
            }
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Tags any error as a data/format failure.
pub trait DataContext<T> {
    fn data(self) -> CliResult<T>;
    fn data_ctx(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> DataContext<T> for Result<T, E> {
    fn data(self) -> CliResult<T> {
        self.map_err(CliError::data)
    }

    fn data_ctx(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::data(e.into().context(what())))
    }
}
