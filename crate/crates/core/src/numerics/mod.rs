//! Dense tensors, reference kernels and their vector-Jacobian products.

pub mod codec;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod pe;
mod tensor;
pub mod vjp;

#[cfg(test)]
pub(crate) mod testutil;

pub use codec::{decode_tensor, encode_tensor, read_tensor, write_tensor, FormatError};
pub use kernels::{
    ffn, layer_norm, linear, matmul, matmul_nt, relu, softmax_rows, FfnWeights, LayerNormParams,
    LAYER_NORM_EPS,
};
pub use pe::{sinusoidal_pe, PositionalEncoding};
pub use tensor::{FeatureMap, Scalar, Tensor};
pub use vjp::{vjp, Op, OpId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
}
