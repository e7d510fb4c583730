//! Single-query attention over a compressed layer cache, plus causal prefill
//! attention over raw activations.
//!
//! [`attend_naive`] reconstructs every key and value first. [`attend_streaming`]
//! walks the token axis in tiles, dequantizing each tile on the fly and
//! folding it into an online softmax (running max, running normalizer,
//! running weighted sum). Compressed tiles come first, then the residual
//! tokens, matching chronological order.

use crate::cache::{LayerCache, Side};
use crate::config::kv_head_for;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_TOKENS: usize = 64;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[num_q_heads, head_dim]`.
    pub output: Tensor,
    /// `[num_q_heads, tokens]` attention weights, only when requested.
    pub scores: Option<Tensor>,
}

/// Tile length of the streaming kernel along the token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    block_tokens: usize,
}

impl BlockSpec {
    pub fn new(block_tokens: usize) -> Result<Self> {
        if block_tokens == 0 {
            return Err(Error::Config("block_tokens must be at least 1".into()));
        }
        Ok(Self { block_tokens })
    }

    pub fn block_tokens(&self) -> usize {
        self.block_tokens
    }
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            block_tokens: DEFAULT_BLOCK_TOKENS,
        }
    }
}

fn check_query(q: &Tensor, cache: &LayerCache) -> Result<(usize, usize)> {
    let &[q_heads, d] = q.shape() else {
        return Err(shape_err(format!("query must be [num_q_heads, head_dim], got {:?}", q.shape())));
    };
    if d != cache.head_dim() {
        return Err(shape_err(format!("query head_dim {d} differs from cache head_dim {}", cache.head_dim())));
    }
    if q_heads == 0 || q_heads % cache.num_heads() != 0 {
        return Err(shape_err(format!(
            "{q_heads} query heads cannot share {} KV heads",
            cache.num_heads()
        )));
    }
    if cache.is_empty() {
        return Err(Error::Precondition("attention over an empty cache".into()));
    }
    Ok((q_heads, d))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over `logits` followed by the weighted sum of value rows, with
/// the normalizer and accumulator in f64. Leaves the probabilities in
/// `weights`.
fn weighted_sum<'a>(logits: &[f32], value: impl Fn(usize) -> &'a [f32], weights: &mut Vec<f64>, out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    weights.clear();
    weights.extend(logits.iter().map(|&s| ((s - max) as f64).exp()));
    let z: f64 = weights.iter().sum();
    let mut acc = vec![0.0f64; out.len()];
    for (j, w) in weights.iter_mut().enumerate() {
        *w /= z;
        for (a, &ve) in acc.iter_mut().zip(value(j)) {
            *a += *w * ve as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// Reference path: reconstruct K̂ and V̂ in full, then softmax attention.
pub fn attend_naive(q: &Tensor, cache: &LayerCache, with_scores: bool) -> Result<AttentionOutput> {
    let (q_heads, d) = check_query(q, cache)?;
    let kv_heads = cache.num_heads();
    let tokens = cache.total_tokens();
    let scale = 1.0 / (d as f32).sqrt();
    let reconstructed: Vec<(Tensor, Tensor)> = (0..kv_heads)
        .map(|h| cache.reconstruct(h))
        .collect::<Result<_>>()?;

    let mut out = vec![0.0f32; q_heads * d];
    let mut all_scores = Vec::with_capacity(if with_scores { q_heads * tokens } else { 0 });
    let mut logits = vec![0.0f32; tokens];
    let mut weights = Vec::with_capacity(tokens);
    for g in 0..q_heads {
        let (k, v) = &reconstructed[kv_head_for(g, q_heads, kv_heads)];
        let qg = q.row(g);
        for (j, s) in logits.iter_mut().enumerate() {
            *s = dot(qg, k.row(j)) * scale;
        }
        weighted_sum(&logits, |j| v.row(j), &mut weights, &mut out[g * d..(g + 1) * d]);
        if with_scores {
            all_scores.extend(weights.iter().map(|&w| w as f32));
        }
    }
    Ok(AttentionOutput {
        output: Tensor::new(vec![q_heads, d], out)?,
        scores: if with_scores {
            Some(Tensor::new(vec![q_heads, tokens], all_scores)?)
        } else {
            None
        },
    })
}

struct OnlineSoftmax {
    max: f32,
    norm: f64,
    acc: Vec<f64>,
}

impl OnlineSoftmax {
    fn new(d: usize) -> Self {
        Self {
            max: f32::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; d],
        }
    }

    /// Folds one tile of pre-scaled logits and matching value rows.
    fn update(&mut self, logits: &[f32], values: &[f32]) {
        let d = self.acc.len();
        let tile_max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let new_max = self.max.max(tile_max);
        if new_max > self.max {
            let correction = ((self.max - new_max) as f64).exp();
            self.norm *= correction;
            for a in &mut self.acc {
                *a *= correction;
            }
            self.max = new_max;
        }
        for (j, &s) in logits.iter().enumerate() {
            let w = ((s - new_max) as f64).exp();
            self.norm += w;
            for (a, &v) in self.acc.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                *a += w * v as f64;
            }
        }
    }

    fn finish(&self, out: &mut [f32]) {
        for (o, &a) in out.iter_mut().zip(&self.acc) {
            *o = (a / self.norm) as f32;
        }
    }
}

/// Tiled attention that never materializes the full K̂/V̂.
pub fn attend_streaming(q: &Tensor, cache: &LayerCache, block: BlockSpec) -> Result<AttentionOutput> {
    let (q_heads, d) = check_query(q, cache)?;
    let kv_heads = cache.num_heads();
    let group = q_heads / kv_heads;
    let scale = 1.0 / (d as f32).sqrt();
    let bt = block.block_tokens;
    let compressed = cache.compressed_tokens();
    let total = cache.total_tokens();

    let mut out = vec![0.0f32; q_heads * d];
    let tile = bt.min(total);
    let mut k_tile = vec![0.0f32; tile * d];
    let mut v_tile = vec![0.0f32; tile * d];
    let mut scores = vec![0.0f32; tile];
    for h in 0..kv_heads {
        // Query heads served by this KV head are contiguous.
        let heads: Vec<usize> = (h * group..(h + 1) * group).collect();
        debug_assert!(heads.iter().all(|&g| kv_head_for(g, q_heads, kv_heads) == h));
        let mut states: Vec<OnlineSoftmax> = heads.iter().map(|_| OnlineSoftmax::new(d)).collect();

        let mut fold = |n: usize, k_tile: &[f32], v_tile: &[f32], states: &mut [OnlineSoftmax]| {
            for (state, &g) in states.iter_mut().zip(&heads) {
                let qg = q.row(g);
                for (j, s) in scores[..n].iter_mut().enumerate() {
                    *s = dot(qg, &k_tile[j * d..(j + 1) * d]) * scale;
                }
                state.update(&scores[..n], &v_tile[..n * d]);
            }
        };

        // Compressed tokens first, then the residual buffer, in one token order.
        let mut start = 0;
        while start < total {
            let n = tile.min(total - start);
            for j in 0..n {
                let t = start + j;
                let (kr, vr) = (&mut k_tile[j * d..(j + 1) * d], &mut v_tile[j * d..(j + 1) * d]);
                if t < compressed {
                    cache.compressed_row_into(Side::Key, t, h, kr);
                    cache.compressed_row_into(Side::Value, t, h, vr);
                } else {
                    kr.copy_from_slice(cache.residual_row(Side::Key, t - compressed, h));
                    vr.copy_from_slice(cache.residual_row(Side::Value, t - compressed, h));
                }
            }
            fold(n, &k_tile, &v_tile, &mut states);
            start += n;
        }
        for (state, &g) in states.iter().zip(&heads) {
            state.finish(&mut out[g * d..(g + 1) * d]);
        }
    }
    Ok(AttentionOutput {
        output: Tensor::new(vec![q_heads, d], out)?,
        scores: None,
    })
}

/// Causal multi-head attention over raw activations.
/// `q_all` is `[tokens, num_q_heads, d]`, keys and values `[tokens, kv_heads, d]`.
pub fn prefill_attend(q_all: &Tensor, k_all: &Tensor, v_all: &Tensor) -> Result<Tensor> {
    let (&[t, q_heads, d], &[tk, kv_heads, dk]) = (q_all.shape(), k_all.shape()) else {
        return Err(shape_err(format!(
            "prefill_attend needs 3-D q/k, got {:?} and {:?}",
            q_all.shape(),
            k_all.shape()
        )));
    };
    if tk != t || dk != d || v_all.shape() != k_all.shape() || kv_heads == 0 || q_heads % kv_heads != 0 {
        return Err(shape_err(format!(
            "prefill_attend: q {:?}, k {:?}, v {:?}",
            q_all.shape(),
            k_all.shape(),
            v_all.shape()
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; t * q_heads * d];
    let mut logits = Vec::with_capacity(t);
    let mut weights = Vec::with_capacity(t);
    let krow = |tok: usize, h: usize| &k_all.data()[(tok * kv_heads + h) * d..(tok * kv_heads + h + 1) * d];
    for pos in 0..t {
        for g in 0..q_heads {
            let h = kv_head_for(g, q_heads, kv_heads);
            let row = (pos * q_heads + g) * d;
            let qg = &q_all.data()[row..row + d];
            logits.clear();
            logits.extend((0..=pos).map(|j| dot(qg, krow(j, h)) * scale));
            let vrow = |j: usize| &v_all.data()[(j * kv_heads + h) * d..(j * kv_heads + h + 1) * d];
            weighted_sum(&logits, vrow, &mut weights, &mut out[row..row + d]);
        }
    }
    Tensor::new(vec![t, q_heads, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::BitWidth;
    use crate::synthetic::{gaussian_tensor, rng, shared_outlier_activations, SharedOutlierSpec};

    /// Attention of one query row over raw rows, computed independently in f64.
    fn oracle(q: &[f32], keys: &[&[f32]], values: &[&[f32]]) -> Vec<f64> {
        let d = q.len();
        let scale = 1.0 / (d as f64).sqrt();
        let s: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(*k).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() * scale)
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        (0..d)
            .map(|c| w.iter().zip(values).map(|(wi, v)| wi * v[c] as f64).sum::<f64>() / z)
            .collect()
    }

    fn populated(seed: u64, tokens: usize, heads: usize, d: usize, r: usize, bits: BitWidth) -> (LayerCache, Tensor, Tensor) {
        let mut g = rng(seed);
        let k = shared_outlier_activations(&mut g, tokens, heads, d, &SharedOutlierSpec::default());
        let v = shared_outlier_activations(&mut g, tokens, heads, d, &SharedOutlierSpec::default());
        let mut c = LayerCache::new(heads, d, r, bits);
        c.append_tokens(&k, &v).unwrap();
        (c, k, v)
    }

    #[test]
    fn single_token_returns_its_value() {
        let (c, _, _) = populated(1, 1, 2, 8, 0, BitWidth::Four);
        let q = gaussian_tensor(2, vec![4, 8], 1.0);
        let out = attend_naive(&q, &c, true).unwrap();
        for g in 0..4 {
            let (_, v) = c.reconstruct(g / 2).unwrap();
            assert_eq!(out.output.row(g), v.row(0));
            assert_eq!(out.scores.as_ref().unwrap().row(g), &[1.0]);
        }
    }

    #[test]
    fn passthrough_matches_raw_oracle() {
        let (c, k, v) = populated(3, 13, 2, 8, 4, BitWidth::Sixteen);
        let q = gaussian_tensor(4, vec![6, 8], 1.0);
        let out = attend_naive(&q, &c, false).unwrap();
        for g in 0..6 {
            let h = g / 3;
            let keys: Vec<&[f32]> = (0..13).map(|t| k.row(t * 2 + h)).collect();
            let vals: Vec<&[f32]> = (0..13).map(|t| v.row(t * 2 + h)).collect();
            let want = oracle(q.row(g), &keys, &vals);
            for (a, b) in out.output.row(g).iter().zip(want) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scores_are_normalized() {
        let (c, _, _) = populated(5, 20, 4, 16, 6, BitWidth::Two);
        let q = gaussian_tensor(6, vec![8, 16], 2.0);
        let s = attend_naive(&q, &c, true).unwrap().scores.unwrap();
        for g in 0..8 {
            let sum: f64 = s.row(g).iter().map(|&p| p as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn streaming_matches_naive_for_all_tilings() {
        for (seed, bits) in [(7, BitWidth::Two), (8, BitWidth::Four), (9, BitWidth::Eight)] {
            let (c, _, _) = populated(seed, 7, 2, 8, 3, bits);
            let q = gaussian_tensor(seed + 100, vec![4, 8], 1.0);
            let naive = attend_naive(&q, &c, false).unwrap().output;
            for bt in [1, 2, 3, 5, 8, 64] {
                let s = attend_streaming(&q, &c, BlockSpec::new(bt).unwrap()).unwrap().output;
                assert!(s.max_abs_diff(&naive) <= 1e-5, "block {bt}");
            }
            let single = attend_streaming(&q, &c, BlockSpec::new(7).unwrap()).unwrap().output;
            assert!(single.max_abs_diff(&naive) <= 1e-6);
        }
    }

    #[test]
    fn empty_cache_and_bad_shapes() {
        let c = LayerCache::new(2, 8, 0, BitWidth::Four);
        let q = Tensor::zeros(vec![4, 8]);
        assert_eq!(attend_naive(&q, &c, false).unwrap_err().kind(), "precondition");
        assert_eq!(attend_streaming(&q, &c, BlockSpec::default()).unwrap_err().kind(), "precondition");
        let (c, _, _) = populated(1, 2, 2, 8, 0, BitWidth::Four);
        assert_eq!(attend_naive(&Tensor::zeros(vec![3, 8]), &c, false).unwrap_err().kind(), "shape");
        assert!(BlockSpec::new(0).is_err());
    }

    #[test]
    fn prefill_matches_brute_force() {
        let q = gaussian_tensor(1, vec![4, 4, 8], 1.0);
        let k = gaussian_tensor(2, vec![4, 2, 8], 1.0);
        let v = gaussian_tensor(3, vec![4, 2, 8], 1.0);
        let out = prefill_attend(&q, &k, &v).unwrap();
        for pos in 0..4 {
            for g in 0..4 {
                let h = g / 2;
                let keys: Vec<&[f32]> = (0..=pos).map(|t| k.row(t * 2 + h)).collect();
                let vals: Vec<&[f32]> = (0..=pos).map(|t| v.row(t * 2 + h)).collect();
                let want = oracle(q.row(pos * 4 + g), &keys, &vals);
                for (a, b) in out.row(pos * 4 + g).iter().zip(want) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }
        // First position sees only its own value.
        for g in 0..4 {
            assert_eq!(out.row(g), v.row(g / 2));
        }
    }
}
