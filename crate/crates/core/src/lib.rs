//! Prefix-shared token compaction for batched transformer inference.
//!
//! Sequences in a ragged batch that share a causal history compute identical
//! position-wise activations for the shared tokens. [`build_plan`] finds those
//! tokens with a prefix trie and returns gather/scatter indices so the
//! position-wise layers run once per unique `(history, token)` row while
//! attention still sees every sequence in full.

pub mod bench;
pub mod compact_ops;
pub mod cost;
pub mod matrix;
pub mod model;
pub mod ragged;
pub mod scalar;
pub mod trie;

pub use compact_ops::{gather_rows, gather_rows_backward, scatter_rows, scatter_rows_backward, IndexOutOfRange};
pub use cost::{compression_ratio, positionwise_fraction, predicted_speedup, CostInputs, Rational};
pub use matrix::{DenseMatrix, ShapeError};
pub use model::{forward, loss_and_grads, FlopLedger, ModelConfig, ModelError, ModelParams};
pub use ragged::{validate_batch, BatchError, BatchFile, RaggedBatch};
pub use scalar::{DType, Scalar};
pub use trie::{build_plan, pad_plan, should_enable, CompactionPlan, PlanError, PlanFile};

/// Gating threshold on `gamma` below which compaction is used.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

pub type Matrix32 = DenseMatrix<f32>;
pub type Matrix64 = DenseMatrix<f64>;
pub type Params32 = ModelParams<f32>;
pub type Params64 = ModelParams<f64>;
