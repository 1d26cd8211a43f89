//! Signature-graph networks.
//!
//! A small trainable convolutional stack whose feature maps are partitioned
//! into equal non-overlapping patches, converted into graphs with one node per
//! patch at a local-extremum coordinate, spectrally normalized via the
//! eigenvalues of the graph Laplacian, and concatenated back into the
//! classifier's feature vector.
//!
//! Modules:
//! - [`data`]: IDX ingestion, raw-tensor import, batching.
//! - [`nn`]: differentiable blocks (conv, batch norm, ReLU, max-pool, fully
//!   connected, cross-entropy) with manual backward passes and SGD.
//! - [`sggraph`]: patch partitioning, extremum node selection, horizontal or
//!   vertical edge chains.
//! - [`spectral`]: degree/adjacency/incidence matrices, normalized Laplacian,
//!   Jacobi eigendecomposition, eigenvalue-scaled node embeddings.
//! - [`model`]: the assembled network, gradient routing, serialization, the
//!   training loop, and the attention head.

pub mod data;
pub mod model;
pub mod nn;
pub mod render;
pub mod sggraph;
pub mod spectral;
pub mod tensor;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes: argument
/// errors exit 2, data errors (i/o, format, shape) exit 3, numeric failures
/// exit 4.
#[derive(Error, Debug)]
pub enum SgnError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, SgnError>;

impl SgnError {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SgnError::Argument(_) => 2,
            SgnError::Io(_) | SgnError::Format(_) | SgnError::Shape(_) => 3,
            SgnError::Numeric(_) => 4,
        }
    }
}
