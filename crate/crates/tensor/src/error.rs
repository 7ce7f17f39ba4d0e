use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: precondition violated: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: root does not depend on any tensor that requires grad")]
    DetachedRoot,

    #[error("backward: graph was already differentiated; build a new graph per step")]
    AlreadyBackpropagated,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tensor dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
