//! Uncompressed-cache decoder used as an oracle for the compressed path.

use super::{argmax, rms_norm, ToyModel};
use crate::config::kv_head_for;
use crate::error::{Error, Result};
use crate::tensor::{rotate_row, row_times_matrix};

/// Token-by-token decoder that keeps raw post-RoPE keys and raw values and
/// attends over them directly.
pub struct ReferenceDecoder<'a> {
    model: &'a ToyModel,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    position: usize,
}

impl<'a> ReferenceDecoder<'a> {
    pub fn new(model: &'a ToyModel) -> Self {
        let layers = model.layers.len();
        Self {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        model.check_token(token)?;
        if self.position >= model.config.max_seq_len {
            return Err(Error::Capacity {
                requested: self.position + 1,
                max: model.config.max_seq_len,
            });
        }
        let m = &model.config.model;
        let (dim, d, hq, hkv) = (model.config.model_dim(), m.head_dim, m.num_q_heads, m.num_kv_heads);
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = model.embed_row(token).to_vec();
        let mut h = vec![0.0f32; dim];
        for (l, layer) in model.layers.iter().enumerate() {
            rms_norm(&x, layer.attn_norm.data(), &mut h);
            let mut q = vec![0.0f32; dim];
            let mut k = vec![0.0f32; hkv * d];
            let mut v = vec![0.0f32; hkv * d];
            row_times_matrix(&h, layer.w_q.data(), &mut q);
            row_times_matrix(&h, layer.w_k.data(), &mut k);
            row_times_matrix(&h, layer.w_v.data(), &mut v);
            for row in q.chunks_mut(d).chain(k.chunks_mut(d)) {
                rotate_row(row, self.position, &m.rope);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let tokens = self.position + 1;
            let mut attn = vec![0.0f32; dim];
            for g in 0..hq {
                let kvh = kv_head_for(g, hq, hkv);
                let qg = &q[g * d..(g + 1) * d];
                let row = |buf: &'_ [f32], t: usize| -> Vec<f64> {
                    buf[(t * hkv + kvh) * d..(t * hkv + kvh + 1) * d].iter().map(|&e| e as f64).collect()
                };
                let logits: Vec<f64> = (0..tokens)
                    .map(|t| row(&self.keys[l], t).iter().zip(qg).map(|(a, &b)| a * b as f64).sum::<f64>() * scale)
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut acc = vec![0.0f64; d];
                for (t, wt) in w.iter().enumerate() {
                    for (a, vt) in acc.iter_mut().zip(row(&self.values[l], t)) {
                        *a += wt / z * vt;
                    }
                }
                for (o, a) in attn[g * d..(g + 1) * d].iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
            model.finish_block(layer, &mut x, &attn);
        }
        self.position += 1;
        Ok(model.head_logits(&x))
    }

    /// Greedy generation from scratch, feeding the prompt one token at a time.
    pub fn generate(model: &'a ToyModel, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Precondition("prompt must not be empty".into()));
        }
        let mut dec = Self::new(model);
        let mut out = prompt.to_vec();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.step(t)?;
        }
        for i in 0..max_new_tokens {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < max_new_tokens {
                logits = dec.step(next)?;
            }
        }
        Ok(out)
    }
}
