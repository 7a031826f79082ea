use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has no unmasked entries")]
    EmptySoftmaxRow { row: usize },

    #[error("loss mask selects no nodes")]
    EmptyMask,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("homogeneous denominator {value:e} at node {node} fell below {eps:e}")]
    DegenerateNormalizer { node: usize, value: f64, eps: f64 },

    #[error("lattice coordinate out of range (|x| = {0:e}); positions or scale too large")]
    LatticeOverflow(f64),

    #[error("node {0} has no incoming edge (missing self-loop)")]
    IsolatedNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("class {class} has {count} labeled nodes; at least {min} are required")]
    ClassTooSmall { class: usize, count: usize, min: usize },

    #[error("could not sample an untied motif chain after {0} attempts")]
    ResampleExhausted(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
