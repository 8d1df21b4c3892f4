use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor descriptor: {0}")]
    InvalidDesc(String),
    #[error("element count overflows the index range for shape {0:?}")]
    Overflow(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: expected {expected}, got {got}")]
    DTypeMismatch {
        expected: crate::DType,
        got: crate::DType,
    },
    #[error("division by zero at element {0}")]
    DivisionByZero(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("operator {op}: {msg}")]
    Operator { op: String, msg: String },
    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("optimizer phase `{got}` called out of order (expected {expected})")]
    PhaseOrder { expected: &'static str, got: &'static str },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn op(op: impl fmt::Display, msg: impl Into<String>) -> Self {
        Error::Operator {
            op: op.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_string(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("cycle detected involving node `{0}`")]
    Cycle(String),
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("edge `{edge}` already produced by `{producer}`")]
    DuplicateProducer { edge: String, producer: String },
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("edge `{edge}` is still consumed by `{consumer}`")]
    EdgeInUse { edge: String, consumer: String },
    #[error("missing feed for graph input `{0}`")]
    MissingFeed(String),
    #[error("loss edge `{0}` is not a scalar")]
    NonScalarLoss(String),
    #[error("declared output `{0}` is not reachable")]
    Unreachable(String),
    #[error("no convolution node in graph")]
    NoConvolution,
    #[error("memory cap of {cap} bytes is below the workspace of node `{node}` at micro-batch 1 ({needed} bytes)")]
    InfeasibleCap { node: String, cap: u64, needed: u64 },
}

/// Model document errors carry a JSON path to the offending value.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed JSON at line {line}, column {column}: {msg}")]
    Json { line: usize, column: usize, msg: String },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path}: unknown operator `{op}`")]
    UnknownOp { path: String, op: String },
    #[error("{path}: malformed attribute `{attr}`: {msg}")]
    Attribute { path: String, attr: String, msg: String },
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("timed out after {millis} ms waiting for rank {from}")]
    Timeout { from: usize, millis: u64 },
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("unexpected message from rank {from}: expected {expected}, got {got}")]
    Unexpected {
        from: usize,
        expected: String,
        got: String,
    },
    #[error("step tag went backwards on channel {from}->{to}: {prev} then {next}")]
    StepOrder {
        from: usize,
        to: usize,
        prev: u64,
        next: u64,
    },
    #[error("peer {0} disconnected")]
    Disconnected(usize),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid world configuration: {0}")]
    World(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported IDX element type code {0:#04x}")]
    UnsupportedDType(u8),
    #[error("truncated IDX payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("trailing bytes after IDX payload: {0}")]
    TrailingBytes(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("dataset mismatch: {0}")]
    Mismatch(String),
    #[error("shape list row {row}: {msg}")]
    ShapeRow { row: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
}
