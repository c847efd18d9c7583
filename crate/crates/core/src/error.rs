use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no feasible node for pod")]
    NoFeasibleNode,

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("empty cluster")]
    EmptyCluster,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("infeasible bind of pod {pod} onto node {node}")]
    InfeasibleBind { pod: String, node: usize },

    #[error("invalid weights file: {0}")]
    Format(String),

    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u32),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
