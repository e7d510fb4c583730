//! Group-wise asymmetric min-max quantization with bit-packed codes.
//!
//! A group is one `(token, head)` row of `head_dim` deviations and carries one
//! `(scale, min)` pair. Codes are packed little-endian within each byte,
//! lowest-order code first, and every group starts on a byte boundary.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Storage precision for deviations. `Sixteen` keeps values unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    Two,
    Four,
    Eight,
    Sixteen,
}

impl BitWidth {
    pub const ALL: [BitWidth; 4] = [BitWidth::Two, BitWidth::Four, BitWidth::Eight, BitWidth::Sixteen];
    pub const QUANTIZED: [BitWidth; 3] = [BitWidth::Two, BitWidth::Four, BitWidth::Eight];

    pub fn bits(self) -> u8 {
        match self {
            BitWidth::Two => 2,
            BitWidth::Four => 4,
            BitWidth::Eight => 8,
            BitWidth::Sixteen => 16,
        }
    }

    pub fn is_passthrough(self) -> bool {
        self == BitWidth::Sixteen
    }

    /// Largest code, `2^bits - 1`.
    pub fn max_code(self) -> u32 {
        (1u32 << self.bits()) - 1
    }

    /// Bytes one group of `group_size` elements occupies in the code stream.
    ///
    /// Pass-through groups hold raw little-endian f32 values.
    pub fn group_bytes(self, group_size: usize) -> usize {
        match self {
            BitWidth::Sixteen => group_size * 4,
            b => (group_size * b.bits() as usize).div_ceil(8),
        }
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            2 => Ok(BitWidth::Two),
            4 => Ok(BitWidth::Four),
            8 => Ok(BitWidth::Eight),
            16 => Ok(BitWidth::Sixteen),
            other => Err(Error::Config(format!("bit width must be 2, 4, 8 or 16, got {other}"))),
        }
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        u8::try_from(v)
            .map_err(|_| Error::Config(format!("bit width must be 2, 4, 8 or 16, got {v}")))?
            .try_into()
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Quantized form of a single group, codes unpacked.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCodes {
    pub codes: Vec<u8>,
    pub scale: f32,
    pub min: f32,
}

/// Reconstructs one element. Evaluated in f64 and rounded once so that the
/// result lies within half a step (plus one f32 rounding) of the input.
#[inline]
pub fn dequantize_value(code: u8, scale: f32, min: f32) -> f32 {
    (min as f64 + code as f64 * scale as f64) as f32
}

#[inline]
fn range_scale(min: f32, max: f32, max_code: u32) -> f32 {
    ((max as f64 - min as f64) / max_code as f64) as f32
}

/// Quantizes `values` into `codes` (one unpacked code per element).
fn quantize_group_into(values: &[f32], bits: BitWidth, codes: &mut [u8]) -> Result<(f32, f32)> {
    if bits.is_passthrough() {
        return Err(Error::Config("16-bit groups are stored unquantized".into()));
    }
    if values.is_empty() {
        return Err(shape_err("cannot quantize an empty group"));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite value {v} in quantization group")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let max_code = bits.max_code();
    let mut scale = range_scale(min, max, max_code);
    // Snap the scale to a fixed point of "dequantize the top code, re-derive
    // the scale" so that quantizing a dequantized group reproduces it exactly.
    for _ in 0..8 {
        let top = dequantize_value(max_code as u8, scale, min);
        let next = range_scale(min, top, max_code);
        if next == scale {
            break;
        }
        scale = next;
    }
    if scale > 0.0 {
        let inv = 1.0 / scale as f64;
        for (c, &v) in codes.iter_mut().zip(values) {
            let q = ((v as f64 - min as f64) * inv).round();
            *c = q.clamp(0.0, max_code as f64) as u8;
        }
    } else {
        scale = 0.0;
        codes.fill(0);
    }
    Ok((scale, min))
}

/// Min-max quantization of one group. Rounding is half away from zero.
pub fn quantize_group(values: &[f32], bits: BitWidth) -> Result<GroupCodes> {
    let mut codes = vec![0u8; values.len()];
    let (scale, min) = quantize_group_into(values, bits, &mut codes)?;
    Ok(GroupCodes { codes, scale, min })
}

/// Packs codes of one group into `out` (which must be `group_bytes` long).
fn pack_into(codes: &[u8], bits: BitWidth, out: &mut [u8]) {
    let b = bits.bits() as usize;
    let per_byte = 8 / b;
    out.fill(0);
    for (i, &c) in codes.iter().enumerate() {
        out[i / per_byte] |= c << ((i % per_byte) * b);
    }
}

fn unpack_into(bytes: &[u8], bits: BitWidth, out: &mut [u8]) {
    let b = bits.bits() as usize;
    let per_byte = 8 / b;
    let mask = bits.max_code() as u8;
    for (i, c) in out.iter_mut().enumerate() {
        *c = (bytes[i / per_byte] >> ((i % per_byte) * b)) & mask;
    }
}

/// Packs one group's codes.
pub fn pack_codes(codes: &[u8], bits: BitWidth) -> Result<Vec<u8>> {
    if bits.is_passthrough() {
        return Err(Error::Config("16-bit groups carry raw values, not codes".into()));
    }
    if let Some(&c) = codes.iter().find(|&&c| c as u32 > bits.max_code()) {
        return Err(Error::Data(format!("code {c} exceeds {bits}-bit range")));
    }
    let mut out = vec![0u8; bits.group_bytes(codes.len())];
    pack_into(codes, bits, &mut out);
    Ok(out)
}

/// Unpacks `count` codes from a single packed group.
pub fn unpack_codes(bytes: &[u8], bits: BitWidth, count: usize) -> Result<Vec<u8>> {
    if bits.is_passthrough() {
        return Err(Error::Config("16-bit groups carry raw values, not codes".into()));
    }
    if bytes.len() != bits.group_bytes(count) {
        return Err(Error::Format(format!(
            "{count} codes at {bits} bits need {} bytes, got {}",
            bits.group_bytes(count),
            bytes.len()
        )));
    }
    let mut out = vec![0u8; count];
    unpack_into(bytes, bits, &mut out);
    Ok(out)
}

/// Packed deviation codes for `num_groups` groups of `group_size` elements,
/// laid out as `[tokens, num_heads]` groups.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDeviation {
    bits: BitWidth,
    num_heads: usize,
    group_size: usize,
    num_groups: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
    mins: Vec<f32>,
}

impl QuantizedDeviation {
    pub fn empty(bits: BitWidth, num_heads: usize, group_size: usize) -> Self {
        Self {
            bits,
            num_heads,
            group_size,
            num_groups: 0,
            codes: Vec::new(),
            scales: Vec::new(),
            mins: Vec::new(),
        }
    }

    /// Assembles a deviation block from raw parts, validating the layout.
    pub fn from_parts(
        bits: BitWidth,
        num_heads: usize,
        group_size: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
        mins: Vec<f32>,
    ) -> Result<Self> {
        if num_heads == 0 || group_size == 0 {
            return Err(Error::Format("num_heads and group_size must be positive".into()));
        }
        let num_groups = scales.len();
        if mins.len() != num_groups {
            return Err(Error::Format(format!(
                "{num_groups} scales but {} mins",
                mins.len()
            )));
        }
        if !num_groups.is_multiple_of(num_heads) {
            return Err(Error::Format(format!(
                "{num_groups} groups is not a whole number of tokens at {num_heads} heads"
            )));
        }
        let expected = num_groups * bits.group_bytes(group_size);
        if codes.len() != expected {
            return Err(Error::Format(format!(
                "code stream is {} bytes, layout requires {expected}",
                codes.len()
            )));
        }
        if scales.iter().chain(&mins).any(|v| !v.is_finite()) || scales.iter().any(|&s| s < 0.0) {
            return Err(Error::Format("scales/mins must be finite, scales non-negative".into()));
        }
        Ok(Self {
            bits,
            num_heads,
            group_size,
            num_groups,
            codes,
            scales,
            mins,
        })
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn tokens(&self) -> usize {
        self.num_groups / self.num_heads
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn mins(&self) -> &[f32] {
        &self.mins
    }

    /// Metadata floats (scale + min) per stored element.
    pub fn metadata_per_element(&self) -> f64 {
        2.0 / self.group_size as f64
    }

    fn group_slice(&self, group: usize) -> &[u8] {
        let gb = self.bits.group_bytes(self.group_size);
        &self.codes[group * gb..(group + 1) * gb]
    }

    /// Unpacked codes of one group (not available for pass-through storage).
    pub fn group_codes(&self, group: usize) -> Result<Vec<u8>> {
        unpack_codes(self.group_slice(group), self.bits, self.group_size)
    }

    /// Writes the dequantized values of `group` into `out`.
    pub fn dequantize_group_into(&self, group: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.group_size);
        let bytes = self.group_slice(group);
        if self.bits.is_passthrough() {
            for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            return;
        }
        let (scale, min) = (self.scales[group], self.mins[group]);
        let b = self.bits.bits() as usize;
        let per_byte = 8 / b;
        let mask = self.bits.max_code() as u8;
        for (i, o) in out.iter_mut().enumerate() {
            let code = (bytes[i / per_byte] >> ((i % per_byte) * b)) & mask;
            *o = dequantize_value(code, scale, min);
        }
    }

    /// Appends the groups of `other`, which must share bits and geometry.
    pub fn extend(&mut self, other: &QuantizedDeviation) -> Result<()> {
        if other.bits != self.bits
            || other.num_heads != self.num_heads
            || other.group_size != self.group_size
        {
            return Err(shape_err(format!(
                "cannot append {}-bit {}x{} deviations to {}-bit {}x{}",
                other.bits,
                other.num_heads,
                other.group_size,
                self.bits,
                self.num_heads,
                self.group_size
            )));
        }
        self.codes.extend_from_slice(&other.codes);
        self.scales.extend_from_slice(&other.scales);
        self.mins.extend_from_slice(&other.mins);
        self.num_groups += other.num_groups;
        Ok(())
    }
}

/// Encodes a single group into its packed bytes plus `(scale, min)`.
pub(crate) fn encode_group(values: &[f32], bits: BitWidth) -> Result<(Vec<u8>, f32, f32)> {
    if bits.is_passthrough() {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {v} in deviation group")));
        }
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        return Ok((bytes, 0.0, 0.0));
    }
    let mut codes = vec![0u8; values.len()];
    let (scale, min) = quantize_group_into(values, bits, &mut codes)?;
    let mut packed = vec![0u8; bits.group_bytes(values.len())];
    pack_into(&codes, bits, &mut packed);
    Ok((packed, scale, min))
}

/// Builds a deviation block from rows that are already laid out
/// `[tokens, num_heads, group_size]`.
pub(crate) fn quantize_rows(
    rows: &[f32],
    num_heads: usize,
    group_size: usize,
    bits: BitWidth,
) -> Result<QuantizedDeviation> {
    let encoded: Vec<(Vec<u8>, f32, f32)> = rows
        .par_chunks(group_size)
        .map(|g| encode_group(g, bits))
        .collect::<Result<_>>()?;
    let mut q = QuantizedDeviation::empty(bits, num_heads, group_size);
    q.codes.reserve(encoded.len() * bits.group_bytes(group_size));
    for (bytes, scale, min) in encoded {
        q.codes.extend_from_slice(&bytes);
        q.scales.push(scale);
        q.mins.push(min);
    }
    q.num_groups = q.scales.len();
    Ok(q)
}

/// Quantizes `[tokens, heads, head_dim]` (or `[rows, head_dim]`, read as one
/// head) with one group per `(token, head)` row.
pub fn quantize_tensor(dev: &Tensor, bits: BitWidth) -> Result<QuantizedDeviation> {
    let (num_heads, group_size) = match dev.shape() {
        [_, d] => (1, *d),
        [_, h, d] => (*h, *d),
        s => return Err(shape_err(format!("deviation tensor must be 2-D or 3-D, got {s:?}"))),
    };
    if num_heads == 0 || group_size == 0 {
        return Err(shape_err(format!("degenerate deviation shape {:?}", dev.shape())));
    }
    quantize_rows(dev.data(), num_heads, group_size, bits)
}

/// Restores `[tokens, heads, head_dim]` from a deviation block.
pub fn dequantize_tensor(q: &QuantizedDeviation) -> Result<Tensor> {
    let gb = q.bits.group_bytes(q.group_size);
    if q.codes.len() != q.num_groups * gb
        || q.scales.len() != q.num_groups
        || q.mins.len() != q.num_groups
    {
        return Err(Error::Format(format!(
            "inconsistent packing: {} code bytes, {} scales, {} mins for {} groups",
            q.codes.len(),
            q.scales.len(),
            q.mins.len(),
            q.num_groups
        )));
    }
    let mut out = vec![0.0f32; q.num_groups * q.group_size];
    for (g, chunk) in out.chunks_mut(q.group_size).enumerate() {
        q.dequantize_group_into(g, chunk);
    }
    Tensor::new(vec![q.tokens(), q.num_heads, q.group_size], out)
}

/// Quantizes raw activations with the same group layout as deviations and
/// returns the reconstruction. This is the no-centering comparator.
pub fn direct_quantize_baseline(x: &Tensor, bits: BitWidth) -> Result<Tensor> {
    let restored = dequantize_tensor(&quantize_tensor(x, bits)?)?;
    restored.reshape(x.shape().to_vec())
}
