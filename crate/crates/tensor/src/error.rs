use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    Argument { op: &'static str, msg: String },

    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Argument { op, msg: msg.into() }
    }
}
