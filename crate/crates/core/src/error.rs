use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("coordinate ({x}, {y}, {z}) outside domain {dims:?}")]
    OutOfDomain {
        x: u64,
        y: u64,
        z: u64,
        dims: [usize; 3],
    },

    #[error("cannot parse numbering scheme: unexpected `{token}`")]
    SchemeParse { token: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("format error on line {line}: {msg}")]
    FormatLine { line: usize, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("too many processes: {parts} partitions for {fluid_cells} fluid cells")]
    TooManyProcesses { parts: u64, fluid_cells: u64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("solver diverged at step {step}")]
    Divergence { step: u64 },

    #[error("not converged: residual {residual:e}")]
    NotConverged { residual: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
