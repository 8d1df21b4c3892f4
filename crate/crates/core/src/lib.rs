//! Reference implementations and validation oracles for benchmarking deep
//! learning workloads at four levels: single operators, network graphs,
//! training loops and data-parallel distributed training.
//!
//! Every level ships a slow-but-checked reference path together with the
//! instruments that measure it (repeated-run statistics, gradient checks,
//! trajectory divergence, communication volume).

pub mod data_io;
pub mod distributed;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod operators;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Rng, Tensor, TensorDesc};

/// Version of the JSON model document schema.
pub const MODEL_SCHEMA_VERSION: u32 = 1;
/// Version of the inter-worker wire frame layout.
pub const WIRE_FORMAT_VERSION: u32 = 1;
