//! Lossy gradient codecs: bucketed stochastic quantization and top-k
//! sparsification with error feedback.

mod pack;
mod quantize;
pub mod rng;
mod topk;

pub use pack::{pack_levels, packed_len, unpack_levels};
pub use quantize::{
    compressed_size_bytes, compression_ratio, dequantize, quantize, wire_size_bytes, CompressedChunk, QuantParams,
    WIRE_HEADER_LEN,
};
pub use topk::{k_for_density, top_k_indices, topk_compress, topk_decompress, ErrorFeedbackState, SparseChunk};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("bucket {bucket} norm overflows f32")]
    NormOverflow { bucket: usize },
    #[error("level {level} at index {index} does not fit in {bits} bits")]
    LevelOverflow { index: usize, level: u8, bits: u8 },
    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed chunk: {0}")]
    Malformed(String),
    #[error("k = {k} out of range for length {len}")]
    InvalidK { k: usize, len: usize },
}
