//! Compress-on-write kernels.
//!
//! [`rope_compress`] rotates, centers and quantizes keys token by token, and
//! [`project_compress`] does the same for the value projection, so neither the
//! rotated key tensor nor the projected value tensor is materialized. Both
//! produce caches bitwise equal to the two-step compositions
//! (`apply_rope` / `matmul`, then [`compress_block`](crate::cache::compress_block)).

use crate::cache::{center_token, CompressedBlock};
use crate::error::{shape_err, Result};
use crate::quant::{encode_group, BitWidth, QuantizedDeviation};
use crate::tensor::{row_times_matrix, rotate_row, RopeParams, Tensor};

struct BlockBuilder {
    heads: usize,
    head_dim: usize,
    bits: BitWidth,
    mean: Vec<f32>,
    codes: Vec<u8>,
    scales: Vec<f32>,
    mins: Vec<f32>,
    mean_row: Vec<f32>,
    dev_row: Vec<f32>,
}

impl BlockBuilder {
    fn new(tokens: usize, heads: usize, head_dim: usize, bits: BitWidth) -> Self {
        Self {
            heads,
            head_dim,
            bits,
            mean: Vec::with_capacity(tokens * head_dim),
            codes: Vec::with_capacity(tokens * heads * bits.group_bytes(head_dim)),
            scales: Vec::with_capacity(tokens * heads),
            mins: Vec::with_capacity(tokens * heads),
            mean_row: vec![0.0; head_dim],
            dev_row: vec![0.0; heads * head_dim],
        }
    }

    /// Centers and quantizes one token given as `[heads, head_dim]`.
    fn push_token(&mut self, token: &[f32]) -> Result<()> {
        center_token(token, self.head_dim, &mut self.mean_row, &mut self.dev_row);
        self.mean.extend_from_slice(&self.mean_row);
        for group in self.dev_row.chunks(self.head_dim) {
            let (bytes, scale, min) = encode_group(group, self.bits)?;
            self.codes.extend_from_slice(&bytes);
            self.scales.push(scale);
            self.mins.push(min);
        }
        Ok(())
    }

    fn finish(self) -> Result<CompressedBlock> {
        Ok(CompressedBlock {
            mean: self.mean,
            dev: QuantizedDeviation::from_parts(
                self.bits,
                self.heads,
                self.head_dim,
                self.codes,
                self.scales,
                self.mins,
            )?,
        })
    }
}

/// RoPE + centering + quantization of raw keys `[tokens, heads, head_dim]`.
pub fn rope_compress(
    keys: &Tensor,
    positions: &[usize],
    rope: &RopeParams,
    bits: BitWidth,
) -> Result<CompressedBlock> {
    rope.validate()?;
    let &[tokens, heads, head_dim] = keys.shape() else {
        return Err(shape_err(format!("keys must be [tokens, heads, head_dim], got {:?}", keys.shape())));
    };
    if head_dim != rope.head_dim || positions.len() != tokens || heads == 0 {
        return Err(shape_err(format!(
            "rope_compress: keys {:?}, {} positions, rope head_dim {}",
            keys.shape(),
            positions.len(),
            rope.head_dim
        )));
    }
    let stride = heads * head_dim;
    let mut builder = BlockBuilder::new(tokens, heads, head_dim, bits);
    let mut scratch = vec![0.0f32; stride];
    for (t, &pos) in positions.iter().enumerate() {
        scratch.copy_from_slice(&keys.data()[t * stride..(t + 1) * stride]);
        for row in scratch.chunks_mut(head_dim) {
            rotate_row(row, pos, rope);
        }
        builder.push_token(&scratch)?;
    }
    builder.finish()
}

/// Value projection `x · w_v` fused with centering and quantization.
/// `x` is `[tokens, model_dim]`, `w_v` is `[model_dim, heads * head_dim]`.
pub fn project_compress(
    x: &Tensor,
    w_v: &Tensor,
    heads: usize,
    head_dim: usize,
    bits: BitWidth,
) -> Result<CompressedBlock> {
    let (&[tokens, model_dim], &[k, n]) = (x.shape(), w_v.shape()) else {
        return Err(shape_err(format!(
            "project_compress needs 2-D operands, got {:?} and {:?}",
            x.shape(),
            w_v.shape()
        )));
    };
    if k != model_dim || n != heads * head_dim || heads == 0 || head_dim == 0 {
        return Err(shape_err(format!(
            "project_compress: x {:?}, w_v {:?}, heads {heads}, head_dim {head_dim}",
            x.shape(),
            w_v.shape()
        )));
    }
    let mut builder = BlockBuilder::new(tokens, heads, head_dim, bits);
    let mut scratch = vec![0.0f32; n];
    for t in 0..tokens {
        row_times_matrix(x.row(t), w_v.data(), &mut scratch);
        builder.push_token(&scratch)?;
    }
    builder.finish()
}
