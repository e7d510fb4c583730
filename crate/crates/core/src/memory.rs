//! Cache size relative to an uncompressed 16-bit cache.
//!
//! A compressed token of one layer stores one mean row (`1/H` of the
//! baseline), `bits/16` for the deviations and two 16-bit metadata values per
//! `head_dim` group (`2/head_dim`). Keys and values are symmetric, so the
//! per-side ratio is the total ratio.

use crate::config::ModelConfig;
use crate::quant::BitWidth;

/// Per-layer terms of the compressed-region ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMemory {
    pub bits: BitWidth,
    pub mean_term: f64,
    pub deviation_term: f64,
    pub metadata_term: f64,
}

impl LayerMemory {
    pub fn ratio(&self) -> f64 {
        self.mean_term + self.deviation_term + self.metadata_term
    }
}

pub fn layer_memory(num_kv_heads: usize, head_dim: usize, bits: BitWidth) -> LayerMemory {
    LayerMemory {
        bits,
        mean_term: 1.0 / num_kv_heads as f64,
        deviation_term: bits.bits() as f64 / 16.0,
        metadata_term: 2.0 / head_dim as f64,
    }
}

pub fn memory_breakdown(cfg: &ModelConfig) -> Vec<LayerMemory> {
    cfg.plan
        .bits()
        .iter()
        .map(|&b| layer_memory(cfg.num_kv_heads, cfg.head_dim, b))
        .collect()
}

/// Mean over layers of compressed bytes / 16-bit baseline bytes for a cache
/// holding `tokens_per_layer` tokens in every layer.
///
/// With `include_residual`, the `tokens % residual_length` buffered tokens
/// count at ratio 1. An empty cache reports 0.
pub fn memory_ratio(cfg: &ModelConfig, tokens_per_layer: usize, include_residual: bool) -> f64 {
    if tokens_per_layer == 0 || cfg.plan.is_empty() {
        return 0.0;
    }
    let residual = match (include_residual, cfg.residual_length) {
        (false, _) | (true, 0) => 0,
        (true, r) => tokens_per_layer % r,
    };
    let residual_frac = residual as f64 / tokens_per_layer as f64;
    let layers = memory_breakdown(cfg);
    layers
        .iter()
        .map(|l| (1.0 - residual_frac) * l.ratio() + residual_frac)
        .sum::<f64>()
        / layers.len() as f64
}
