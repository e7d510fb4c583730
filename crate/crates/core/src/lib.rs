//! Mean-centered, quantized KV-cache compression for transformer decoding.
//!
//! Per token, the key and value activations of all KV heads are replaced by a
//! single cross-head mean plus per-head deviations, and only the deviations
//! are quantized (2, 4 or 8 bits, group-wise asymmetric min-max). The most
//! recent tokens stay uncompressed in a residual buffer. Attention runs either
//! over a fully reconstructed cache or as a tiled online-softmax kernel that
//! dequantizes on the fly.
//!
//! The crate also carries a small seeded decoder ([`model::ToyModel`]) so the
//! cache can be exercised end to end, a random search over per-layer bit
//! widths, and a Frobenius-error ablation against direct quantization.

pub mod ablation;
pub mod attention;
pub mod cache;
pub mod config;
pub mod error;
pub mod fused;
pub mod memory;
pub mod model;
pub mod quant;
pub mod search;
pub mod selftest;
pub mod synthetic;
pub mod tensor;

pub use attention::{attend_naive, attend_streaming, prefill_attend, AttentionOutput, BlockSpec};
pub use cache::{
    compress_block, deserialize_cache, mean_center, serialize_cache, CompressedBlock, LayerCache, Side,
};
pub use config::{ModelConfig, PrecisionPlan};
pub use error::{Error, Result};
pub use fused::{project_compress, rope_compress};
pub use memory::{layer_memory, memory_breakdown, memory_ratio, LayerMemory};
pub use quant::{
    dequantize_tensor, direct_quantize_baseline, quantize_group, quantize_tensor, BitWidth, QuantizedDeviation,
};
pub use model::{load_weights, save_weights, ReferenceDecoder, ToyConfig, ToyModel, WeightSpec};
pub use search::{random_search, score_plan, CalibrationReport, CalibrationSet, SearchConfig};
pub use tensor::{apply_rope, matmul, softmax_rows, RopeParams, Tensor};
