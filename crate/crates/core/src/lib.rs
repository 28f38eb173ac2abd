//! Training-free adaptive block-sparse global attention for multi-view
//! transformers.
//!
//! The pipeline: [`mask::predict_mask`] average-pools patch-token queries
//! and keys into blocks, scores pooled block pairs with a softmax, and picks
//! key blocks per query block by a CDF threshold and a minimum-count ratio.
//! [`sparse::sparse_attention`] then computes attention only on the selected
//! patch-patch tiles while keeping every row and column that touches a
//! special (camera/register) token dense. [`dense`] holds the exact
//! reference, and [`analysis`] the tooling used to study attention maps and
//! measure the sparsity/speed trade-off.

pub mod analysis;
pub mod dense;
pub mod error;
pub mod format;
mod kernel;
pub mod layout;
pub mod mask;
pub mod sparse;
pub mod tensor;

pub use dense::{dense_attention, dense_attention_map, AttentionInputs};
pub use error::{DecodeError, Error, Result};
pub use layout::{BlockGeometry, Permutation, SpecialPlacement, TokenKind, TokenLayout};
pub use mask::{predict_mask, BlockMask, MaskPolicy, PooledScores};
pub use sparse::{flop_estimate, sparse_attention, FlopEstimate, SparseAttentionJob};
pub use tensor::Tensor;
