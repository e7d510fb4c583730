use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::tensor::{RopeParams, DEFAULT_ROPE_BASE};

/// Per-layer deviation bit widths; the same width applies to keys and values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionPlan {
    bits_per_layer: Vec<BitWidth>,
}

impl PrecisionPlan {
    pub fn new(bits_per_layer: Vec<BitWidth>) -> Self {
        Self { bits_per_layer }
    }

    pub fn uniform(num_layers: usize, bits: BitWidth) -> Self {
        Self::new(vec![bits; num_layers])
    }

    pub fn len(&self) -> usize {
        self.bits_per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits_per_layer.is_empty()
    }

    pub fn layer(&self, idx: usize) -> BitWidth {
        self.bits_per_layer[idx]
    }

    pub fn bits(&self) -> &[BitWidth] {
        &self.bits_per_layer
    }

    /// Returns the width if every layer uses the same one.
    pub fn as_uniform(&self) -> Option<BitWidth> {
        let first = *self.bits_per_layer.first()?;
        self.bits_per_layer.iter().all(|&b| b == first).then_some(first)
    }

    pub fn mean_bits(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.bits_per_layer.iter().map(|b| b.bits() as f64).sum::<f64>() / self.len() as f64
    }

    /// Parses `uniform:N` (needs the layer count) or a comma list like `4,4,2`.
    pub fn parse(spec: &str, num_layers: usize) -> Result<Self> {
        let spec = spec.trim();
        if let Some(bits) = spec.strip_prefix("uniform:") {
            let bits: u8 = bits
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad uniform plan {spec:?}")))?;
            return Ok(Self::uniform(num_layers, BitWidth::try_from(bits)?));
        }
        spec.parse()
    }
}

impl FromStr for PrecisionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|tok| {
                let v: u8 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad bit width {tok:?} in plan")))?;
                BitWidth::try_from(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(bits))
    }
}

impl fmt::Display for PrecisionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.bits_per_layer.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Cache geometry shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub residual_length: usize,
    pub rope: RopeParams,
    pub plan: PrecisionPlan,
}

impl ModelConfig {
    /// Default toy geometry: 4 layers, 8 query heads over 2 KV heads, head_dim 16.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            num_q_heads: 8,
            num_kv_heads: 2,
            head_dim: 16,
            residual_length: 8,
            rope: RopeParams {
                head_dim: 16,
                base: DEFAULT_ROPE_BASE,
            },
            plan: PrecisionPlan::uniform(4, BitWidth::Four),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_q_heads == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("layer, head and dimension counts must be positive".into()));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_q_heads {} is not a multiple of num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} differs from head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()?;
        if self.plan.len() != self.num_layers {
            return Err(Error::Config(format!(
                "plan has {} entries for {} layers",
                self.plan.len(),
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn with_plan(mut self, plan: PrecisionPlan) -> Self {
        self.plan = plan;
        self
    }

    pub fn with_residual(mut self, residual_length: usize) -> Self {
        self.residual_length = residual_length;
        self
    }

    /// KV head serving query head `q_head`.
    pub fn kv_head_for(&self, q_head: usize) -> usize {
        kv_head_for(q_head, self.num_q_heads, self.num_kv_heads)
    }
}

pub(crate) fn kv_head_for(q_head: usize, num_q_heads: usize, num_kv_heads: usize) -> usize {
    q_head * num_kv_heads / num_q_heads
}
