//! Sparse Bayesian engine for social recommendation.
//!
//! Jointly factorizes an ordinal user-item rating matrix and a binary
//! user-user graph. Two models share the machinery:
//!
//! * [`ogfa`]: a single layer of user factors shared by ratings and edges.
//! * [`oggbn`]: a gamma belief network stacking factor layers, with the
//!   t-th layer explaining the t-th boolean power of the graph.
//!
//! Inference is Gibbs sampling with Poisson data augmentation plus closed-form
//! EM updates of the ordinal thresholds. Cost per sweep is linear in the
//! number of observed ratings and edges.

pub mod checkpoint;
pub mod dataio;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod ogfa;
pub mod oggbn;
pub mod ordinal;
pub mod posterior;
pub mod rng;
pub mod sparse;

use thiserror::Error;

pub use graph::{edge_rate, EdgeCounts, UserKeys};
pub use matrix::DenseMatrix;
pub use ogfa::{gibbs_sweep, Hyper, OgfaState, SamplerOptions, Synthetic};
pub use oggbn::{deep_sweep, DeepState};
pub use ordinal::{em_update, ThresholdModel, ThresholdStats};
pub use rng::{RngStream, SampleError};
pub use sparse::{adjacency_power, AdjacencyGraph, OrdinalMatrix, SparseError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("hyperparameter `{name}` must be positive and finite, got {value}")]
    BadHyper { name: &'static str, value: f64 },
    #[error("no posterior states supplied")]
    EmptyStateList,
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("state invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Sample(#[from] rng::SampleError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Ordinal(#[from] ordinal::OrdinalError),
    #[error(transparent)]
    Sparse(#[from] sparse::SparseError),
}
