//! Fast invariant checks run by `tada selftest`.

use std::time::Instant;

use rand::Rng;

use crate::ablation::{reconstruction_error, MethodTag};
use crate::attention::{attend_naive, attend_streaming, BlockSpec};
use crate::cache::{compress_block, deserialize_cache, mean_center, serialize_cache, LayerCache};
use crate::config::{ModelConfig, PrecisionPlan};
use crate::fused::{project_compress, rope_compress};
use crate::memory::memory_ratio;
use crate::model::{load_weights, save_weights, ToyConfig, ToyModel, WeightSpec};
use crate::quant::{dequantize_value, pack_codes, quantize_group, unpack_codes, BitWidth};
use crate::synthetic::{gaussian_from, gaussian_tensor, rng, shared_outlier_activations, SharedOutlierSpec};
use crate::tensor::{apply_rope, matmul, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
    pub millis: u128,
}

type Check = fn() -> std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn memory_formula() -> std::result::Result<(), String> {
    let mut cfg = ModelConfig::toy();
    cfg.num_layers = 32;
    cfg.num_q_heads = 32;
    cfg.num_kv_heads = 32;
    cfg.head_dim = 128;
    cfg.rope.head_dim = 128;
    cfg.plan = PrecisionPlan::uniform(32, BitWidth::Four);
    let r = memory_ratio(&cfg, 4096, false);
    ensure(r == 0.296875, || format!("uniform 4-bit ratio {r}"))
}

fn quantizer_bound() -> std::result::Result<(), String> {
    let mut r = rng(1);
    for bits in BitWidth::QUANTIZED {
        for _ in 0..2000 {
            let x = gaussian_from(&mut r, vec![32], 1.0);
            let g = quantize_group(x.data(), bits).map_err(err)?;
            for (&v, &c) in x.data().iter().zip(&g.codes) {
                ensure(c as u32 <= bits.max_code(), || format!("code {c} out of range"))?;
                let e = (v - dequantize_value(c, g.scale, g.min)).abs();
                ensure(e <= g.scale / 2.0 + 1e-6, || format!("{bits}-bit error {e} exceeds bound"))?;
            }
            let packed = pack_codes(&g.codes, bits).map_err(err)?;
            ensure(unpack_codes(&packed, bits, 32).map_err(err)? == g.codes, || "pack round trip".into())?;
        }
    }
    Ok(())
}

fn centering_identity() -> std::result::Result<(), String> {
    let x = gaussian_tensor(2, vec![8, 4, 16], 3.0);
    let (_, dev) = mean_center(&x).map_err(err)?;
    for t in 0..8 {
        for j in 0..16 {
            let s: f32 = (0..4).map(|h| dev.row(t * 4 + h)[j]).sum();
            ensure(s.abs() <= 1e-5, || format!("deviation sum {s}"))?;
        }
    }
    Ok(())
}

fn identical_heads_lossless() -> std::result::Result<(), String> {
    let x = shared_outlier_activations(&mut rng(3), 9, 4, 16, &SharedOutlierSpec::identical_heads());
    for bits in BitWidth::ALL {
        let mut c = LayerCache::new(4, 16, 4, bits);
        c.append_tokens(&x, &x).map_err(err)?;
        for h in 0..4 {
            let (k, _) = c.reconstruct(h).map_err(err)?;
            for t in 0..9 {
                ensure(k.row(t) == x.row(t * 4 + h), || format!("{bits}-bit lossy at token {t}"))?;
            }
        }
    }
    Ok(())
}

fn streaming_equivalence() -> std::result::Result<(), String> {
    let mut r = rng(4);
    for _ in 0..10 {
        let tokens = r.random_range(1..40);
        let bits = BitWidth::ALL[r.random_range(0..4)];
        let mut c = LayerCache::new(2, 8, r.random_range(0..10), bits);
        let k = gaussian_from(&mut r, vec![tokens, 2, 8], 1.0);
        let v = gaussian_from(&mut r, vec![tokens, 2, 8], 1.0);
        c.append_tokens(&k, &v).map_err(err)?;
        let q = gaussian_from(&mut r, vec![4, 8], 1.0);
        let naive = attend_naive(&q, &c, false).map_err(err)?.output;
        for bt in [1, 3, 64] {
            let s = attend_streaming(&q, &c, BlockSpec::new(bt).map_err(err)?).map_err(err)?.output;
            let diff = s.max_abs_diff(&naive);
            ensure(diff <= 1e-5, || format!("block {bt}: diff {diff}"))?;
        }
    }
    Ok(())
}

fn fused_equivalence() -> std::result::Result<(), String> {
    let rope = crate::tensor::RopeParams::new(16, crate::tensor::DEFAULT_ROPE_BASE).map_err(err)?;
    let k = gaussian_tensor(5, vec![6, 2, 16], 1.0);
    let positions = [0, 1, 2, 30, 31, 500];
    let x = gaussian_tensor(6, vec![6, 32], 1.0);
    let w = gaussian_tensor(7, vec![32, 32], 0.2);
    for bits in BitWidth::ALL {
        let fused = rope_compress(&k, &positions, &rope, bits).map_err(err)?;
        let plain = compress_block(&apply_rope(&k, &positions, &rope).map_err(err)?, bits).map_err(err)?;
        ensure(fused == plain, || format!("rope_compress differs at {bits} bits"))?;
        let fused = project_compress(&x, &w, 2, 16, bits).map_err(err)?;
        let v = matmul(&x, &w).map_err(err)?.reshape(vec![6, 2, 16]).map_err(err)?;
        ensure(fused == compress_block(&v, bits).map_err(err)?, || format!("project_compress differs at {bits} bits"))?;
    }
    Ok(())
}

fn serialization() -> std::result::Result<(), String> {
    let mut c = LayerCache::new(2, 8, 3, BitWidth::Two);
    let x = gaussian_tensor(8, vec![7, 2, 8], 1.0);
    c.append_tokens(&x, &x).map_err(err)?;
    let bytes = serialize_cache(&c);
    ensure(deserialize_cache(&bytes).map_err(err)? == c, || "cache round trip".into())?;
    ensure(deserialize_cache(&bytes[..bytes.len() - 1]).is_err(), || "truncated cache accepted".into())?;
    let mut cfg = ToyConfig::toy();
    cfg.vocab_size = 16;
    let model = ToyModel::synthetic(cfg, &WeightSpec::new(1)).map_err(err)?;
    let w = save_weights(&model);
    ensure(load_weights(&w).map_err(err)? == model, || "weight round trip".into())?;
    ensure(load_weights(&w[..w.len() - 4]).is_err(), || "truncated weights accepted".into())
}

fn prefill_decode_consistency() -> std::result::Result<(), String> {
    let mut cfg = ToyConfig::toy();
    cfg.vocab_size = 64;
    let model = ToyModel::synthetic(cfg, &WeightSpec::new(2)).map_err(err)?;
    let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let full = model.forward_full(&tokens).map_err(err)?;
    let mut caches = model.new_caches(&PrecisionPlan::uniform(4, BitWidth::Sixteen), 0).map_err(err)?;
    for (pos, &t) in tokens.iter().enumerate() {
        let logits = model.decode_step(&mut caches, t, pos, BlockSpec::default()).map_err(err)?;
        let step = Tensor::new(vec![logits.len()], logits).map_err(err)?;
        let want = Tensor::new(vec![64], full.logits.row(pos).to_vec()).map_err(err)?;
        let diff = step.max_abs_diff(&want);
        ensure(diff <= 1e-5, || format!("position {pos}: diff {diff}"))?;
    }
    Ok(())
}

fn outlier_robustness() -> std::result::Result<(), String> {
    for seed in 0..10 {
        let x = shared_outlier_activations(&mut rng(seed), 16, 4, 32, &SharedOutlierSpec::default());
        let t = reconstruction_error(&x, MethodTag::Tada, BitWidth::Four).map_err(err)?;
        let d = reconstruction_error(&x, MethodTag::Direct, BitWidth::Four).map_err(err)?;
        ensure(t < d, || format!("seed {seed}: centered {t} vs direct {d}"))?;
    }
    Ok(())
}

const CHECKS: &[(&str, Check)] = &[
    ("memory-formula", memory_formula),
    ("quantizer-bound", quantizer_bound),
    ("centering-identity", centering_identity),
    ("identical-heads-lossless", identical_heads_lossless),
    ("streaming-equivalence", streaming_equivalence),
    ("fused-equivalence", fused_equivalence),
    ("serialization", serialization),
    ("prefill-decode-consistency", prefill_decode_consistency),
    ("outlier-robustness", outlier_robustness),
];

pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let outcome = check();
            CheckResult {
                name,
                outcome,
                millis: start.elapsed().as_millis(),
            }
        })
        .collect()
}
