//! Compressed per-layer KV store.
//!
//! Each layer keeps, for keys and values separately, one cross-head mean row
//! per token plus quantized per-head deviations `mean - x`. The most recent
//! tokens sit uncompressed in a residual buffer that is flushed as a whole
//! once it holds `residual_length` tokens.

mod serial;

pub use serial::{deserialize_cache, serialize_cache, CACHE_MAGIC};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::quant::{quantize_rows, BitWidth, QuantizedDeviation};
use crate::tensor::Tensor;

/// Writes the cross-head mean of one token (`[heads, head_dim]`) into `mean`
/// and the deviations `mean - x` into `dev`.
///
/// The mean accumulates in f64 so identical heads yield their value exactly.
pub(crate) fn center_token(x: &[f32], head_dim: usize, mean: &mut [f32], dev: &mut [f32]) {
    let heads = x.len() / head_dim;
    for (j, m) in mean.iter_mut().enumerate() {
        let sum: f64 = (0..heads).map(|h| x[h * head_dim + j] as f64).sum();
        *m = (sum / heads as f64) as f32;
    }
    for (h, dev_row) in dev.chunks_mut(head_dim).enumerate() {
        let x_row = &x[h * head_dim..(h + 1) * head_dim];
        for ((d, &xv), &m) in dev_row.iter_mut().zip(x_row).zip(mean.iter()) {
            *d = m - xv;
        }
    }
}

/// Splits `[tokens, heads, head_dim]` into per-token means `[tokens, head_dim]`
/// and deviations `mean - x` of the input's shape.
pub fn mean_center(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[tokens, heads, head_dim] = x.shape() else {
        return Err(shape_err(format!("mean_center expects [tokens, heads, head_dim], got {:?}", x.shape())));
    };
    if heads == 0 || head_dim == 0 {
        return Err(shape_err("mean_center needs at least one head and dimension"));
    }
    let mut mean = vec![0.0f32; tokens * head_dim];
    let mut dev = vec![0.0f32; x.len()];
    let stride = heads * head_dim;
    for t in 0..tokens {
        center_token(
            &x.data()[t * stride..(t + 1) * stride],
            head_dim,
            &mut mean[t * head_dim..(t + 1) * head_dim],
            &mut dev[t * stride..(t + 1) * stride],
        );
    }
    Ok((
        Tensor::new(vec![tokens, head_dim], mean)?,
        Tensor::new(x.shape().to_vec(), dev)?,
    ))
}

/// One side (keys or values) of a run of compressed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    /// `[tokens, head_dim]` cross-head means.
    pub mean: Vec<f32>,
    pub dev: QuantizedDeviation,
}

impl CompressedBlock {
    pub fn tokens(&self) -> usize {
        self.dev.tokens()
    }
}

/// Centers and quantizes `[tokens, heads, head_dim]` rows laid out flat.
pub(crate) fn compress_rows(rows: &[f32], heads: usize, head_dim: usize, bits: BitWidth) -> Result<CompressedBlock> {
    let stride = heads * head_dim;
    let tokens = rows.len() / stride;
    let mut mean = vec![0.0f32; tokens * head_dim];
    let mut dev = vec![0.0f32; rows.len()];
    for t in 0..tokens {
        center_token(
            &rows[t * stride..(t + 1) * stride],
            head_dim,
            &mut mean[t * head_dim..(t + 1) * head_dim],
            &mut dev[t * stride..(t + 1) * stride],
        );
    }
    Ok(CompressedBlock {
        mean,
        dev: quantize_rows(&dev, heads, head_dim, bits)?,
    })
}

/// Unfused compression: [`mean_center`] followed by quantization.
pub fn compress_block(x: &Tensor, bits: BitWidth) -> Result<CompressedBlock> {
    let (mean, dev) = mean_center(x)?;
    let &[_, heads, head_dim] = x.shape() else { unreachable!() };
    Ok(CompressedBlock {
        mean: mean.into_data(),
        dev: quantize_rows(dev.data(), heads, head_dim, bits)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Key,
    Value,
}

/// One layer's compressed keys and values plus the residual buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    num_heads: usize,
    head_dim: usize,
    residual_length: usize,
    bits: BitWidth,
    k_mean: Vec<f32>,
    v_mean: Vec<f32>,
    k_dev: QuantizedDeviation,
    v_dev: QuantizedDeviation,
    residual_k: Vec<f32>,
    residual_v: Vec<f32>,
}

impl LayerCache {
    pub fn new(num_heads: usize, head_dim: usize, residual_length: usize, bits: BitWidth) -> Self {
        Self {
            num_heads,
            head_dim,
            residual_length,
            bits,
            k_mean: Vec::new(),
            v_mean: Vec::new(),
            k_dev: QuantizedDeviation::empty(bits, num_heads, head_dim),
            v_dev: QuantizedDeviation::empty(bits, num_heads, head_dim),
            residual_k: Vec::new(),
            residual_v: Vec::new(),
        }
    }

    pub fn for_layer(cfg: &ModelConfig, layer_idx: usize) -> Result<Self> {
        if layer_idx >= cfg.num_layers {
            return Err(Error::Config(format!(
                "layer {layer_idx} out of range for {} layers",
                cfg.num_layers
            )));
        }
        Ok(Self::new(
            cfg.num_kv_heads,
            cfg.head_dim,
            cfg.residual_length,
            cfg.plan.layer(layer_idx),
        ))
    }

    /// One empty cache per layer of `cfg`.
    pub fn for_model(cfg: &ModelConfig) -> Result<Vec<Self>> {
        cfg.validate()?;
        (0..cfg.num_layers).map(|l| Self::for_layer(cfg, l)).collect()
    }

    pub(crate) fn from_parts(
        residual_length: usize,
        k_mean: Vec<f32>,
        v_mean: Vec<f32>,
        k_dev: QuantizedDeviation,
        v_dev: QuantizedDeviation,
        residual_k: Vec<f32>,
        residual_v: Vec<f32>,
    ) -> Result<Self> {
        let (num_heads, head_dim, bits) = (k_dev.num_heads(), k_dev.group_size(), k_dev.bits());
        let n = k_dev.tokens();
        let stride = num_heads * head_dim;
        let consistent = v_dev.num_heads() == num_heads
            && v_dev.group_size() == head_dim
            && v_dev.bits() == bits
            && v_dev.tokens() == n
            && k_mean.len() == n * head_dim
            && v_mean.len() == n * head_dim
            && residual_k.len() == residual_v.len()
            && residual_k.len().is_multiple_of(stride);
        if !consistent {
            return Err(Error::Format("inconsistent layer cache components".into()));
        }
        if [&k_mean, &v_mean, &residual_k, &residual_v]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Format("non-finite value in cache".into()));
        }
        // A full buffer is always flushed, so at most R - 1 tokens remain.
        let r = residual_k.len() / stride;
        if r > 0 && r >= residual_length {
            return Err(Error::Format(format!(
                "residual buffer holds {r} tokens, limit is {}",
                residual_length.saturating_sub(1)
            )));
        }
        Ok(Self {
            num_heads,
            head_dim,
            residual_length,
            bits,
            k_mean,
            v_mean,
            k_dev,
            v_dev,
            residual_k,
            residual_v,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn residual_length(&self) -> usize {
        self.residual_length
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn compressed_tokens(&self) -> usize {
        self.k_dev.tokens()
    }

    /// Tokens currently held uncompressed (`r`).
    pub fn residual_count(&self) -> usize {
        self.residual_k.len() / (self.num_heads * self.head_dim)
    }

    pub fn total_tokens(&self) -> usize {
        self.compressed_tokens() + self.residual_count()
    }

    pub fn is_empty(&self) -> bool {
        self.total_tokens() == 0
    }

    pub fn mean(&self, side: Side) -> &[f32] {
        match side {
            Side::Key => &self.k_mean,
            Side::Value => &self.v_mean,
        }
    }

    pub fn deviations(&self, side: Side) -> &QuantizedDeviation {
        match side {
            Side::Key => &self.k_dev,
            Side::Value => &self.v_dev,
        }
    }

    /// Raw residual rows, `[r, heads, head_dim]` flat.
    pub fn residual(&self, side: Side) -> &[f32] {
        match side {
            Side::Key => &self.residual_k,
            Side::Value => &self.residual_v,
        }
    }

    fn check_tokens(&self, name: &str, x: &Tensor) -> Result<usize> {
        match x.shape() {
            &[t, h, d] if h == self.num_heads && d == self.head_dim => Ok(t),
            s => Err(shape_err(format!(
                "{name} must be [tokens, {}, {}], got {s:?}",
                self.num_heads, self.head_dim
            ))),
        }
    }

    /// Appends post-RoPE keys and values, both `[tokens, heads, head_dim]`.
    ///
    /// Tokens land in the residual buffer; whenever it reaches
    /// `residual_length` the whole buffer is compressed. With a zero residual
    /// length tokens are compressed immediately.
    pub fn append_tokens(&mut self, k_new: &Tensor, v_new: &Tensor) -> Result<()> {
        let t = self.check_tokens("keys", k_new)?;
        if self.check_tokens("values", v_new)? != t {
            return Err(shape_err("keys and values carry different token counts"));
        }
        if !k_new.all_finite() || !v_new.all_finite() {
            return Err(Error::Data("non-finite key/value activations".into()));
        }
        if self.residual_length == 0 {
            let k = compress_rows(k_new.data(), self.num_heads, self.head_dim, self.bits)?;
            let v = compress_rows(v_new.data(), self.num_heads, self.head_dim, self.bits)?;
            return self.push_compressed(k, v);
        }
        let stride = self.num_heads * self.head_dim;
        for (k_row, v_row) in k_new.data().chunks(stride).zip(v_new.data().chunks(stride)) {
            self.residual_k.extend_from_slice(k_row);
            self.residual_v.extend_from_slice(v_row);
            if self.residual_count() == self.residual_length {
                self.flush()?;
            }
        }
        Ok(())
    }

    /// Appends already-compressed tokens. Only valid while the residual buffer
    /// is empty, so chronological order is kept.
    pub fn push_compressed(&mut self, k: CompressedBlock, v: CompressedBlock) -> Result<()> {
        if self.residual_count() != 0 {
            return Err(Error::State(format!(
                "cannot append compressed tokens behind {} residual tokens",
                self.residual_count()
            )));
        }
        if k.tokens() != v.tokens()
            || k.mean.len() != k.tokens() * self.head_dim
            || v.mean.len() != v.tokens() * self.head_dim
        {
            return Err(shape_err("compressed key/value blocks disagree"));
        }
        self.k_dev.extend(&k.dev)?;
        self.v_dev.extend(&v.dev)?;
        self.k_mean.extend_from_slice(&k.mean);
        self.v_mean.extend_from_slice(&v.mean);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let k = compress_rows(&self.residual_k, self.num_heads, self.head_dim, self.bits)?;
        let v = compress_rows(&self.residual_v, self.num_heads, self.head_dim, self.bits)?;
        self.residual_k.clear();
        self.residual_v.clear();
        self.push_compressed(k, v)
    }

    /// Reconstructs compressed token `token` of `head` into `out`:
    /// `mean - dequantize(deviation)`.
    pub(crate) fn compressed_row_into(&self, side: Side, token: usize, head: usize, out: &mut [f32]) {
        let d = self.head_dim;
        self.deviations(side)
            .dequantize_group_into(token * self.num_heads + head, out);
        let mean = &self.mean(side)[token * d..(token + 1) * d];
        for (o, &m) in out.iter_mut().zip(mean) {
            *o = m - *o;
        }
    }

    /// Residual row `idx` (0 = oldest buffered token) of `head`.
    pub(crate) fn residual_row(&self, side: Side, idx: usize, head: usize) -> &[f32] {
        let d = self.head_dim;
        let start = (idx * self.num_heads + head) * d;
        &self.residual(side)[start..start + d]
    }

    /// Full `[tokens, head_dim]` keys and values seen by `head`, oldest first:
    /// reconstructed compressed rows followed by the exact residual rows.
    pub fn reconstruct(&self, head: usize) -> Result<(Tensor, Tensor)> {
        if head >= self.num_heads {
            return Err(Error::Precondition(format!(
                "head {head} out of range for {} heads",
                self.num_heads
            )));
        }
        let d = self.head_dim;
        let total = self.total_tokens();
        let mut k = vec![0.0f32; total * d];
        let mut v = vec![0.0f32; total * d];
        let n = self.compressed_tokens();
        for t in 0..n {
            self.compressed_row_into(Side::Key, t, head, &mut k[t * d..(t + 1) * d]);
            self.compressed_row_into(Side::Value, t, head, &mut v[t * d..(t + 1) * d]);
        }
        for r in 0..self.residual_count() {
            let t = n + r;
            k[t * d..(t + 1) * d].copy_from_slice(self.residual_row(Side::Key, r, head));
            v[t * d..(t + 1) * d].copy_from_slice(self.residual_row(Side::Value, r, head));
        }
        Ok((Tensor::new(vec![total, d], k)?, Tensor::new(vec![total, d], v)?))
    }
}
