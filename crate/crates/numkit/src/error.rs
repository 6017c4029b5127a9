use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("normal matrix is singular (pivot {pivot} at row {row}); retry with lambda > 0")]
    Singular { row: usize, pivot: f64 },
    #[error(
        "eigensolver did not converge on {name} after {sweeps} sweeps (off-diagonal norm {off})"
    )]
    NoConvergence {
        name: String,
        sweeps: usize,
        off: f64,
    },
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(NumError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
