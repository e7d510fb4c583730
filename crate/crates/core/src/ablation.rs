//! Per-layer Frobenius reconstruction error of the cached keys and values,
//! for mean-centered compression versus quantizing raw activations directly.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::cache::compress_block;
use crate::config::PrecisionPlan;
use crate::error::{shape_err, Error, Result};
use crate::model::ToyModel;
use crate::quant::{dequantize_tensor, direct_quantize_baseline, BitWidth};
use crate::search::CalibrationSet;
use crate::tensor::{frobenius_distance, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    /// Mean-centered compression under a (possibly mixed) plan.
    Tada,
    /// Mean-centered compression with one width for every layer.
    TadaUniform,
    /// The same group quantizer applied to raw activations.
    Direct,
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodTag::Tada => "tada",
            MethodTag::TadaUniform => "tada-uniform",
            MethodTag::Direct => "direct",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMethod {
    pub tag: MethodTag,
    pub plan: PrecisionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub method: MethodTag,
    pub layer_idx: usize,
    pub bits: BitWidth,
    pub frobenius_k: f64,
    pub frobenius_v: f64,
}

/// `mean - dequantize(quantize(mean - x))` for `x` of shape `[tokens, heads, head_dim]`.
pub fn tada_round_trip(x: &Tensor, bits: BitWidth) -> Result<Tensor> {
    let &[tokens, heads, d] = x.shape() else {
        return Err(shape_err(format!("expected [tokens, heads, head_dim], got {:?}", x.shape())));
    };
    let block = compress_block(x, bits)?;
    let dev = dequantize_tensor(&block.dev)?;
    Tensor::new(
        vec![tokens, heads, d],
        dev.data()
            .iter()
            .enumerate()
            .map(|(i, &e)| block.mean[(i / (heads * d)) * d + i % d] - e)
            .collect(),
    )
}

/// Frobenius distance between `x` and its reconstruction under `tag`.
pub fn reconstruction_error(x: &Tensor, tag: MethodTag, bits: BitWidth) -> Result<f64> {
    let approx = match tag {
        MethodTag::Tada | MethodTag::TadaUniform => tada_round_trip(x, bits)?,
        MethodTag::Direct => direct_quantize_baseline(x, bits)?,
    };
    Ok(frobenius_distance(x.data(), approx.data()))
}

/// Runs every calibration sequence through the model once with raw
/// activations retained, then measures each method's per-layer error. Norms
/// are taken over all sequences together. Every token is compressed; the
/// residual buffer plays no part here.
pub fn ablate_frobenius(model: &ToyModel, calib: &CalibrationSet, methods: &[AblationMethod]) -> Result<Vec<AblationRecord>> {
    let layers = model.cache_config().num_layers;
    if let Some(m) = methods.iter().find(|m| m.plan.len() != layers) {
        return Err(Error::Config(format!(
            "{} plan has {} entries for {layers} layers",
            m.tag,
            m.plan.len()
        )));
    }
    let mut sq = vec![[0.0f64; 2]; methods.len() * layers];
    for seq in calib.sequences() {
        let pass = model.forward_full(seq)?;
        for (mi, m) in methods.iter().enumerate() {
            for l in 0..layers {
                let bits = m.plan.layer(l);
                let ek = reconstruction_error(&pass.keys[l], m.tag, bits)?;
                let ev = reconstruction_error(&pass.values[l], m.tag, bits)?;
                let acc = &mut sq[mi * layers + l];
                acc[0] += ek * ek;
                acc[1] += ev * ev;
            }
        }
    }
    Ok(methods
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| {
            let sq = &sq;
            (0..layers).map(move |l| AblationRecord {
                method: m.tag,
                layer_idx: l,
                bits: m.plan.layer(l),
                frobenius_k: sq[mi * layers + l][0].sqrt(),
                frobenius_v: sq[mi * layers + l][1].sqrt(),
            })
        })
        .collect())
}

pub fn ablation_csv(records: &[AblationRecord]) -> String {
    let mut out = String::from("method,layer_idx,bits,frobenius_k,frobenius_v\n");
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.method, r.layer_idx, r.bits.bits(), r.frobenius_k, r.frobenius_v).unwrap();
    }
    out
}
