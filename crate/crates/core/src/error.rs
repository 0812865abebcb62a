use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("statistically invalid: {0}")]
    Statistical(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("non-finite {component} at step {step} (weight norms: {weight_norms})")]
    NonFinite { step: u64, component: String, weight_norms: String },
    #[error("checkpoint config hash {found} does not match run config hash {expected}")]
    ResumeMismatch { expected: String, found: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Error {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }
}
