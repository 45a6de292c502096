use std::fmt;

/// User errors exit with 1, internal failures with 2.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::User(m) => m.clone(),
            CliError::Internal(m) => format!("internal error: {m}"),
        };
        // Diagnostics are a single line.
        f.write_str(&msg.replace('\n', " "))
    }
}

impl From<thermvis::Error> for CliError {
    fn from(e: thermvis::Error) -> Self {
        match e {
            thermvis::Error::NonFinite { .. } => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

pub fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::User(format!("failed to read or write {}: {e}", path.display()))
}
