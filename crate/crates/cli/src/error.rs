use std::fmt;

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or input files. Exit code 1.
    Validation(String),
    /// Failures while running or writing results. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<cdlite::Error> for CliError {
    fn from(e: cdlite::Error) -> Self {
        use cdlite::Error as E;
        match e {
            E::Io(_) | E::NonFinite { .. } | E::Backward(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reading a user-supplied file: any failure is a validation error.
pub trait InputContext<T> {
    fn input(self, what: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> InputContext<T> for Result<T, E> {
    fn input(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Validation(format!("{what}: {e}")))
    }
}

/// Writing an output: any failure is a runtime error.
pub trait OutputContext<T> {
    fn output(self, what: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> OutputContext<T> for Result<T, E> {
    fn output(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}
