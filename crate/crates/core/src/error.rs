use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("integration failed at t={t}, h={h}: {reason}")]
    Integration { t: f64, h: f64, reason: String },

    #[error("step size fell below h_min at t={t} (h={h})")]
    Stiffness { t: f64, h: f64 },

    #[error("step budget of {max_steps} exhausted at t={t}")]
    Budget { max_steps: usize, t: f64 },

    #[error("unsupported time grid: {0}")]
    UnsupportedGrid(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("non-finite loss at step {step} (replay seed {seed})")]
    NonFiniteLoss { step: u64, seed: u64 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Time at which an ODE solve failed, if this is a solver error.
    pub fn solver_time(&self) -> Option<f64> {
        match self {
            Error::Integration { t, .. } | Error::Stiffness { t, .. } | Error::Budget { t, .. } => {
                Some(*t)
            }
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
