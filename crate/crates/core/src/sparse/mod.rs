//! Hash-indexed sparse voxel tensors and rulebook-driven sparse convolution.
//!
//! A [`SparseTensor`] stores active sites in canonical `(batch, z, y, x)`
//! order. Convolutions are split into two phases: a [`Rulebook`] that
//! records, per kernel offset, which input row feeds which output row, and
//! a gather-multiply-scatter pass over those pairs. The same rulebook
//! drives the backward pass.

mod conv;
mod coord;
mod dense;
mod rulebook;
mod tensor;

pub use conv::{
    conv_backward, conv_backward_raw, conv_forward, conv_forward_raw, ConvGrads, ConvWeights,
};
pub use coord::{Coord, CoordSet};
pub use dense::{densify, sparsify, DenseGrid, MAX_DENSE_ENTRIES};
pub use rulebook::{build_rulebook, kernel_offsets, ConvMode, Rulebook};
pub use tensor::SparseTensor;
