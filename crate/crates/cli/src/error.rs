use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Clap(clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) if !e.use_stderr() => 0,
            CliError::Clap(_) | CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<saccn::Error> for CliError {
    fn from(e: saccn::Error) -> Self {
        use saccn::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Any failure while reading `what` is a data error naming it.
pub fn reading(what: &std::path::Path) -> impl FnOnce(saccn::Error) -> CliError + '_ {
    move |e| {
        let text = e.to_string();
        let shown = what.display().to_string();
        if text.contains(&shown) {
            CliError::Data(text)
        } else {
            CliError::Data(format!("{shown}: {text}"))
        }
    }
}
