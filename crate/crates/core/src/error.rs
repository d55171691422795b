use thiserror::Error;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum PodError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("non-finite or unparseable value {value:?} at row {row}, column {column:?}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column {0:?} not found in header")]
    MissingColumn(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<PodError>,
    },

    #[error("replication {rep}: {source}")]
    Replication {
        rep: usize,
        #[source]
        source: Box<PodError>,
    },
}

impl PodError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PodError::Config(_) => ErrorKind::Config,
            PodError::Data(_)
            | PodError::Io { .. }
            | PodError::Csv(_)
            | PodError::BadCell { .. }
            | PodError::MissingColumn(_)
            | PodError::Dimension(_) => ErrorKind::Data,
            PodError::NotSymmetric(_)
            | PodError::NoConvergence(_)
            | PodError::Singular(_)
            | PodError::Numerical(_) => ErrorKind::Numerical,
            PodError::Fold { source, .. } | PodError::Replication { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        PodError::Fold {
            fold,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = PodError> = std::result::Result<T, E>;
