use thiserror::Error;

use crate::data::ValidationFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(ValidationFailure),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is identically zero")]
    ZeroDesign,

    /// `n - tr(P_tau)` vanished; only possible when the design has rank `n`
    /// and the penalty approaches zero.
    #[error("degenerate GCV denominator (n - tr(P) = {0:e})")]
    DegenerateGcv(f64),

    #[error("OLS undefined: design rank {rank} < {columns} columns")]
    OlsUndefined { rank: usize, columns: usize },

    /// Instrument columns that are linear combinations of earlier ones.
    #[error("collinear instruments (dependent columns {dependent:?})")]
    CollinearInstruments { dependent: Vec<usize> },

    #[error("column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("equation {equation}: {source}")]
    Equation {
        equation: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("could not generate stable cyclic network after {0} attempts")]
    UnstableNetwork(usize),

    #[error("linear system is singular: {0}")]
    Singular(String),
}

impl Error {
    pub(crate) fn in_column(self, column: usize) -> Self {
        Error::Column {
            column,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_equation(self, equation: usize) -> Self {
        Error::Equation {
            equation,
            source: Box::new(self),
        }
    }
}
