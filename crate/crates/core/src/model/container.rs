//! TADAW1 weight container.
//!
//! ```text
//! magic "TADAW1"
//! u32 version (1)
//! u64 manifest_len, then manifest_len bytes of UTF-8 JSON:
//!     {"config": {...}, "tensors": {name: {"shape": [...], "offset": bytes}}}
//! payload: little-endian f32 blobs, offsets relative to the payload start
//! ```
//!
//! Tensors are written in name order, back to back. On load every expected
//! tensor must be present with the expected shape, blobs must not overlap,
//! and the payload length must equal the sum of the tensor sizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, ToyConfig, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"TADAW1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ToyConfig,
    tensors: BTreeMap<String, Entry>,
}

pub fn save_weights(model: &ToyModel) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    let mut names: Vec<(String, Vec<usize>)> = model.expected_shapes();
    names.sort();
    let mut offset = 0u64;
    for (name, shape) in &names {
        tensors.insert(name.clone(), Entry { shape: shape.clone(), offset });
        offset += 4 * shape.iter().product::<usize>() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config.clone(),
        tensors,
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(18 + manifest.len() + offset as usize);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (name, _) in &names {
        for v in model.tensor(name).expect("expected tensor exists").data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn load_weights(bytes: &[u8]) -> Result<ToyModel> {
    let header = WEIGHTS_MAGIC.len() + 4 + 8;
    if bytes.len() < header || &bytes[..6] != WEIGHTS_MAGIC {
        return Err(format_err("missing TADAW1 header"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(format_err(format!("unsupported container version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let payload_start = usize::try_from(manifest_len)
        .ok()
        .and_then(|n| n.checked_add(header))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err("manifest extends past end of stream"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[header..payload_start])
        .map_err(|e| format_err(format!("bad manifest: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    let mut total = 0u64;
    for (name, e) in &manifest.tensors {
        let len = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| format_err(format!("{name}: size overflows")))?;
        let end = e
            .offset
            .checked_add(len)
            .ok_or_else(|| format_err(format!("{name}: offset overflows")))?;
        spans.push((e.offset, end, name));
        total += len;
    }
    if total != payload.len() as u64 {
        return Err(format_err(format!(
            "payload holds {} bytes, manifest describes {total}",
            payload.len()
        )));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format_err(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }

    let config = manifest.config;
    config.validate()?;
    let mut tensors = manifest.tensors;
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
        let e = tensors
            .remove(name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(format_err(format!("{name}: shape {:?}, expected {shape:?}", e.shape)));
        }
        let start = e.offset as usize;
        let n: usize = shape.iter().product();
        let data = payload[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    };

    let m = &config.model;
    let dim = config.model_dim();
    let kv_dim = m.num_kv_heads * m.head_dim;
    let embed = take("embed", vec![config.vocab_size, dim])?;
    let final_norm = take("final_norm", vec![dim])?;
    let lm_head = take("lm_head", vec![dim, config.vocab_size])?;
    let mut layers = Vec::with_capacity(m.num_layers);
    for l in 0..m.num_layers {
        let mut t = |part: &str, shape: Vec<usize>| take(&format!("layers.{l}.{part}"), shape);
        layers.push(LayerWeights {
            attn_norm: t("attn_norm", vec![dim])?,
            w_q: t("w_q", vec![dim, dim])?,
            w_k: t("w_k", vec![dim, kv_dim])?,
            w_v: t("w_v", vec![dim, kv_dim])?,
            w_o: t("w_o", vec![dim, dim])?,
            ffn_norm: t("ffn_norm", vec![dim])?,
            w_up: t("w_up", vec![dim, 4 * dim])?,
            w_down: t("w_down", vec![4 * dim, dim])?,
        });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format_err(format!("unexpected tensor {extra}")));
    }
    if !layers.iter().all(|l| {
        [&l.attn_norm, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ffn_norm, &l.w_up, &l.w_down]
            .iter()
            .all(|t| t.all_finite())
    }) || !embed.all_finite()
        || !lm_head.all_finite()
        || !final_norm.all_finite()
    {
        return Err(Error::Data("weights contain non-finite values".into()));
    }
    ToyModel::from_weights(config, embed, layers, final_norm, lm_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightSpec;

    fn tiny() -> ToyModel {
        let cfg = ToyConfig::from_json(
            r#"{"num_layers":2,"num_q_heads":4,"num_kv_heads":2,"head_dim":4,"vocab_size":11,"residual_length":3}"#,
        )
        .unwrap();
        ToyModel::synthetic(cfg, &WeightSpec::new(9)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = save_weights(&m);
        assert_eq!(&bytes[..6], b"TADAW1");
        let back = load_weights(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_weights(&back), bytes);
    }

    #[test]
    fn rejects_damaged_streams() {
        let bytes = save_weights(&tiny());
        for cut in [0, 5, 17, 40, bytes.len() - 1] {
            assert_eq!(load_weights(&bytes[..cut]).unwrap_err().kind(), "format", "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(load_weights(&extra).is_err());
        let mut v = bytes.clone();
        v[6] = 2;
        assert!(load_weights(&v).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(load_weights(&nan).unwrap_err().kind(), "data");
    }

    #[test]
    fn rejects_overlapping_offsets() {
        let bytes = save_weights(&tiny());
        let len = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[18..18 + len]).unwrap();
        // Point final_norm at the embedding's bytes; sizes still add up.
        let mut m: serde_json::Value = serde_json::from_str(text).unwrap();
        m["tensors"]["final_norm"]["offset"] = 0.into();
        let manifest = serde_json::to_vec(&m).unwrap();
        let mut out = bytes[..10].to_vec();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&bytes[18 + len..]);
        let err = load_weights(&out).unwrap_err();
        assert_eq!(err.kind(), "format");
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}
