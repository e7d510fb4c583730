//! A small pre-norm causal decoder wired to the compressed cache.
//!
//! Each block is RMSNorm → grouped-query attention → residual add, then
//! RMSNorm → GELU feed-forward (4× expansion) → residual add. The output head
//! is untied from the embedding. Weights are either generated from a seed or
//! loaded from a TADAW1 container ([`container`]).

mod container;
mod reference;

pub use container::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use reference::ReferenceDecoder;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_streaming, prefill_attend, BlockSpec};
use crate::cache::LayerCache;
use crate::config::{ModelConfig, PrecisionPlan};
use crate::error::{Error, Result};
use crate::fused::{project_compress, rope_compress};
use crate::synthetic::{gaussian_from, rng, SharedOutlierSpec};
use crate::tensor::{apply_rope, matmul, rotate_row, row_times_matrix, RopeParams, Tensor, DEFAULT_ROPE_BASE};

pub const DEFAULT_MAX_SEQ_LEN: usize = 2048;
const NORM_EPS: f32 = 1e-5;

/// Cache geometry plus the parts of the model that do not touch the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigFile", into = "ConfigFile")]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

/// Flat JSON form of [`ToyConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    num_layers: usize,
    num_q_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_dim: Option<usize>,
    vocab_size: usize,
    #[serde(default = "default_rope_base")]
    rope_base: f64,
    residual_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<PrecisionPlan>,
    #[serde(default = "default_max_seq_len")]
    max_seq_len: usize,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_max_seq_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}

impl TryFrom<ConfigFile> for ToyConfig {
    type Error = Error;

    fn try_from(f: ConfigFile) -> Result<Self> {
        let plan = f
            .plan
            .unwrap_or_else(|| PrecisionPlan::uniform(f.num_layers, crate::quant::BitWidth::Four));
        let cfg = ToyConfig {
            model: ModelConfig {
                num_layers: f.num_layers,
                num_q_heads: f.num_q_heads,
                num_kv_heads: f.num_kv_heads,
                head_dim: f.head_dim,
                residual_length: f.residual_length,
                rope: RopeParams {
                    head_dim: f.head_dim,
                    base: f.rope_base,
                },
                plan,
            },
            vocab_size: f.vocab_size,
            max_seq_len: f.max_seq_len,
        };
        if let Some(dim) = f.model_dim {
            if dim != cfg.model_dim() {
                return Err(Error::Config(format!(
                    "model_dim {dim} must equal num_q_heads * head_dim = {}",
                    cfg.model_dim()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ToyConfig> for ConfigFile {
    fn from(c: ToyConfig) -> Self {
        let model_dim = c.model_dim();
        let m = c.model;
        ConfigFile {
            num_layers: m.num_layers,
            num_q_heads: m.num_q_heads,
            num_kv_heads: m.num_kv_heads,
            head_dim: m.head_dim,
            model_dim: Some(model_dim),
            vocab_size: c.vocab_size,
            rope_base: m.rope.base,
            residual_length: m.residual_length,
            plan: Some(m.plan),
            max_seq_len: c.max_seq_len,
        }
    }
}

impl ToyConfig {
    /// 4 layers, 8 query / 2 KV heads, head_dim 16, vocab 256.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            vocab_size: 256,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.model.num_q_heads * self.model.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// How synthetic weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub seed: u64,
    /// Structure of the W_K / W_V head blocks: a shared base block with
    /// amplified outlier columns, plus per-head noise.
    pub kv: SharedOutlierSpec,
}

impl WeightSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            kv: SharedOutlierSpec {
                outlier_channels: 2,
                outlier_scale: 8.0,
                head_noise: 0.5,
            },
        }
    }

    /// Every KV head gets the same projection, so every cache is lossless.
    pub fn identical_heads(seed: u64) -> Self {
        Self {
            kv: SharedOutlierSpec {
                head_noise: 0.0,
                ..Self::new(seed).kv
            },
            ..Self::new(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Activations of a full causal pass.
#[derive(Debug, Clone)]
pub struct FullPass {
    /// `[tokens, vocab]`.
    pub logits: Tensor,
    /// Post-RoPE keys per layer, `[tokens, kv_heads, head_dim]`.
    pub keys: Vec<Tensor>,
    /// Values per layer, `[tokens, kv_heads, head_dim]`.
    pub values: Vec<Tensor>,
}

fn rms_norm(x: &[f32], weight: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / ((ms as f32) + NORM_EPS).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// `-log softmax(logits)[target]`, in f64.
pub fn token_nll(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize] as f64
}

/// Head block of W_K / W_V: `[model_dim, heads * head_dim]` where each
/// head's columns are `base + noise`.
fn shared_outlier_projection(r: &mut impl Rng, model_dim: usize, heads: usize, head_dim: usize, spec: &SharedOutlierSpec) -> Tensor {
    let sigma = 1.0 / (model_dim as f32).sqrt();
    let mut base = gaussian_from(r, vec![model_dim, head_dim], sigma);
    let channels = spec.pick_channels(r, head_dim);
    for row in 0..model_dim {
        for &c in &channels {
            base.data_mut()[row * head_dim + c] *= spec.outlier_scale;
        }
    }
    let noise = gaussian_from(r, vec![model_dim, heads * head_dim], sigma * spec.head_noise);
    Tensor::from_fn(vec![model_dim, heads * head_dim], |i| {
        let (row, col) = (i / (heads * head_dim), i % (heads * head_dim));
        base.data()[row * head_dim + col % head_dim] + noise.data()[i]
    })
}

impl ToyModel {
    pub fn synthetic(config: ToyConfig, spec: &WeightSpec) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let dim = config.model_dim();
        let kv_dim = m.num_kv_heads * m.head_dim;
        let hidden = 4 * dim;
        let s = |n: usize| 1.0 / (n as f32).sqrt();
        let mut r = rng(spec.seed);
        let embed = gaussian_from(&mut r, vec![config.vocab_size, dim], 1.0);
        let layers = (0..m.num_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::from_fn(vec![dim], |_| 1.0),
                w_q: gaussian_from(&mut r, vec![dim, dim], s(dim)),
                w_k: shared_outlier_projection(&mut r, dim, m.num_kv_heads, m.head_dim, &spec.kv),
                w_v: shared_outlier_projection(&mut r, dim, m.num_kv_heads, m.head_dim, &spec.kv),
                w_o: gaussian_from(&mut r, vec![dim, dim], s(dim)),
                ffn_norm: Tensor::from_fn(vec![dim], |_| 1.0),
                w_up: gaussian_from(&mut r, vec![dim, hidden], s(dim)),
                w_down: gaussian_from(&mut r, vec![hidden, dim], s(hidden)),
            })
            .collect::<Vec<_>>();
        debug_assert!(layers.iter().all(|l| l.w_k.shape() == [dim, kv_dim]));
        let final_norm = Tensor::from_fn(vec![dim], |_| 1.0);
        let lm_head = gaussian_from(&mut r, vec![dim, config.vocab_size], s(dim));
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_weights(
        config: ToyConfig,
        embed: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        lm_head: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        };
        for (name, shape) in model.expected_shapes() {
            let actual = model.tensor(&name).map(|t| t.shape().to_vec());
            if actual.as_deref() != Some(&shape[..]) {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {actual:?}")));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn cache_config(&self) -> &ModelConfig {
        &self.config.model
    }

    /// Every weight tensor's name and shape.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let m = &self.config.model;
        let dim = self.config.model_dim();
        let kv_dim = m.num_kv_heads * m.head_dim;
        let v = self.config.vocab_size;
        let mut out = vec![
            ("embed".to_string(), vec![v, dim]),
            ("final_norm".to_string(), vec![dim]),
            ("lm_head".to_string(), vec![dim, v]),
        ];
        for l in 0..m.num_layers {
            for (part, shape) in [
                ("attn_norm", vec![dim]),
                ("w_q", vec![dim, dim]),
                ("w_k", vec![dim, kv_dim]),
                ("w_v", vec![dim, kv_dim]),
                ("w_o", vec![dim, dim]),
                ("ffn_norm", vec![dim]),
                ("w_up", vec![dim, 4 * dim]),
                ("w_down", vec![4 * dim, dim]),
            ] {
                out.push((format!("layers.{l}.{part}"), shape));
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        match name {
            "embed" => return Some(&self.embed),
            "final_norm" => return Some(&self.final_norm),
            "lm_head" => return Some(&self.lm_head),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, part) = rest.split_once('.')?;
        let l = self.layers.get(idx.parse::<usize>().ok()?)?;
        Some(match part {
            "attn_norm" => &l.attn_norm,
            "w_q" => &l.w_q,
            "w_k" => &l.w_k,
            "w_v" => &l.w_v,
            "w_o" => &l.w_o,
            "ffn_norm" => &l.ffn_norm,
            "w_up" => &l.w_up,
            "w_down" => &l.w_down,
            _ => return None,
        })
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::Data(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_row(&self, token: u32) -> &[f32] {
        self.embed.row(token as usize)
    }

    /// Residual-stream update after attention: output projection, then the
    /// feed-forward half of the block. `attn` is `[num_q_heads * head_dim]`.
    fn finish_block(&self, layer: &LayerWeights, x: &mut [f32], attn: &[f32]) {
        let dim = x.len();
        let mut proj = vec![0.0f32; dim];
        row_times_matrix(attn, layer.w_o.data(), &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
        let mut h = vec![0.0f32; dim];
        rms_norm(x, layer.ffn_norm.data(), &mut h);
        let mut up = vec![0.0f32; 4 * dim];
        row_times_matrix(&h, layer.w_up.data(), &mut up);
        for u in &mut up {
            *u = gelu(*u);
        }
        row_times_matrix(&up, layer.w_down.data(), &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
    }

    fn head_logits(&self, x: &[f32]) -> Vec<f32> {
        let mut h = vec![0.0f32; x.len()];
        rms_norm(x, self.final_norm.data(), &mut h);
        let mut logits = vec![0.0f32; self.config.vocab_size];
        row_times_matrix(&h, self.lm_head.data(), &mut logits);
        logits
    }

    /// Causal pass over `tokens` with uncompressed attention.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<FullPass> {
        if tokens.is_empty() {
            return Err(Error::Precondition("forward pass over an empty sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let m = &self.config.model;
        let (n, dim, d) = (tokens.len(), self.config.model_dim(), m.head_dim);
        let positions: Vec<usize> = (0..n).collect();
        let mut x: Vec<f32> = tokens.iter().flat_map(|&t| self.embed_row(t).iter().copied()).collect();
        let mut keys = Vec::with_capacity(m.num_layers);
        let mut values = Vec::with_capacity(m.num_layers);
        for layer in &self.layers {
            let mut h = vec![0.0f32; n * dim];
            for (xr, hr) in x.chunks(dim).zip(h.chunks_mut(dim)) {
                rms_norm(xr, layer.attn_norm.data(), hr);
            }
            let h = Tensor::new(vec![n, dim], h)?;
            let q = apply_rope(&matmul(&h, &layer.w_q)?.reshape(vec![n, m.num_q_heads, d])?, &positions, &m.rope)?;
            let k = apply_rope(&matmul(&h, &layer.w_k)?.reshape(vec![n, m.num_kv_heads, d])?, &positions, &m.rope)?;
            let v = matmul(&h, &layer.w_v)?.reshape(vec![n, m.num_kv_heads, d])?;
            let attn = prefill_attend(&q, &k, &v)?;
            for (xr, ar) in x.chunks_mut(dim).zip(attn.data().chunks(dim)) {
                self.finish_block(layer, xr, ar);
            }
            keys.push(k);
            values.push(v);
        }
        let logits: Vec<f32> = x.chunks(dim).flat_map(|xr| self.head_logits(xr)).collect();
        Ok(FullPass {
            logits: Tensor::new(vec![n, self.config.vocab_size], logits)?,
            keys,
            values,
        })
    }

    /// Empty caches for `plan` and residual length `residual_length`.
    pub fn new_caches(&self, plan: &PrecisionPlan, residual_length: usize) -> Result<Vec<LayerCache>> {
        LayerCache::for_model(&self.config.model.clone().with_plan(plan.clone()).with_residual(residual_length))
    }

    /// One decode step at `position`, which must equal the number of tokens
    /// already cached. Appends this token's keys and values to `caches` and
    /// returns the next-token logits.
    ///
    /// With a zero residual length the value projection and the key
    /// rotation go straight into compression; otherwise the raw rows enter
    /// the residual buffer.
    pub fn decode_step(&self, caches: &mut [LayerCache], token: u32, position: usize, block: BlockSpec) -> Result<Vec<f32>> {
        self.check_token(token)?;
        let m = &self.config.model;
        if caches.len() != m.num_layers {
            return Err(Error::Shape(format!("{} caches for {} layers", caches.len(), m.num_layers)));
        }
        if let Some(c) = caches.iter().find(|c| c.total_tokens() != position) {
            return Err(Error::State(format!(
                "decode position {position} but cache holds {} tokens",
                c.total_tokens()
            )));
        }
        if position >= self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: position + 1,
                max: self.config.max_seq_len,
            });
        }
        let (dim, d, kv) = (self.config.model_dim(), m.head_dim, m.num_kv_heads);
        let mut x = self.embed_row(token).to_vec();
        let mut h = vec![0.0f32; dim];
        let mut q = vec![0.0f32; dim];
        let mut k = vec![0.0f32; kv * d];
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            rms_norm(&x, layer.attn_norm.data(), &mut h);
            row_times_matrix(&h, layer.w_q.data(), &mut q);
            row_times_matrix(&h, layer.w_k.data(), &mut k);
            for row in q.chunks_mut(d) {
                rotate_row(row, position, &m.rope);
            }
            if cache.residual_length() == 0 {
                let bits = cache.bits();
                let hx = Tensor::new(vec![1, dim], h.clone())?;
                let v_block = project_compress(&hx, &layer.w_v, kv, d, bits)?;
                let k_raw = Tensor::new(vec![1, kv, d], k.clone())?;
                let k_block = rope_compress(&k_raw, &[position], &m.rope, bits)?;
                cache.push_compressed(k_block, v_block)?;
            } else {
                for row in k.chunks_mut(d) {
                    rotate_row(row, position, &m.rope);
                }
                let mut v = vec![0.0f32; kv * d];
                row_times_matrix(&h, layer.w_v.data(), &mut v);
                cache.append_tokens(&Tensor::new(vec![1, kv, d], k.clone())?, &Tensor::new(vec![1, kv, d], v)?)?;
            }
            let qt = Tensor::new(vec![m.num_q_heads, d], q.clone())?;
            let attn = attend_streaming(&qt, cache, block)?;
            self.finish_block(layer, &mut x, attn.output.data());
        }
        Ok(self.head_logits(&x))
    }

    /// Fills fresh caches with the prompt through a full causal pass and
    /// returns them with the logits of the last prompt position.
    pub fn prefill(&self, prompt: &[u32], plan: &PrecisionPlan, residual_length: usize) -> Result<(Vec<LayerCache>, Vec<f32>)> {
        let pass = self.forward_full(prompt)?;
        let mut caches = self.new_caches(plan, residual_length)?;
        for ((cache, k), v) in caches.iter_mut().zip(&pass.keys).zip(&pass.values) {
            cache.append_tokens(k, v)?;
        }
        let last = pass.logits.row(prompt.len() - 1).to_vec();
        Ok((caches, last))
    }

    /// Greedy generation. Returns the prompt followed by `max_new_tokens`
    /// generated ids.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        plan: &PrecisionPlan,
        residual_length: usize,
        block: BlockSpec,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Precondition("prompt must not be empty".into()));
        }
        let total = prompt.len() + max_new_tokens;
        if total > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: total,
                max: self.config.max_seq_len,
            });
        }
        let mut out = prompt.to_vec();
        if max_new_tokens == 0 {
            return Ok(out);
        }
        let (mut caches, mut logits) = self.prefill(prompt, plan, residual_length)?;
        loop {
            let next = argmax(&logits);
            out.push(next);
            if out.len() == total {
                return Ok(out);
            }
            logits = self.decode_step(&mut caches, next, out.len() - 1, block)?;
        }
    }

    /// Mean next-token NLL of `tokens` when decoded one token at a time
    /// through caches built with `plan`.
    pub fn sequence_nll(&self, tokens: &[u32], plan: &PrecisionPlan, residual_length: usize, block: BlockSpec) -> Result<f64> {
        let (sum, count) = self.sequence_nll_sum(tokens, plan, residual_length, block)?;
        Ok(sum / count as f64)
    }

    pub(crate) fn sequence_nll_sum(
        &self,
        tokens: &[u32],
        plan: &PrecisionPlan,
        residual_length: usize,
        block: BlockSpec,
    ) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::Data("a scored sequence needs at least 2 tokens".into()));
        }
        let mut caches = self.new_caches(plan, residual_length)?;
        let mut sum = 0.0;
        for (pos, pair) in tokens.windows(2).enumerate() {
            let logits = self.decode_step(&mut caches, pair[0], pos, block)?;
            self.check_token(pair[1])?;
            sum += token_nll(&logits, pair[1]);
        }
        Ok((sum, tokens.len() - 1))
    }

    /// Mean next-token NLL of `tokens` under uncompressed causal attention.
    pub fn uncompressed_nll(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Data("a scored sequence needs at least 2 tokens".into()));
        }
        let pass = self.forward_full(&tokens[..tokens.len() - 1])?;
        let sum: f64 = tokens[1..]
            .iter()
            .enumerate()
            .map(|(i, &t)| token_nll(pass.logits.row(i), t))
            .sum();
        Ok(sum / (tokens.len() - 1) as f64)
    }
}
