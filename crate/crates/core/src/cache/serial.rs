//! TADAKV1 binary layout for one layer cache. All integers and floats are
//! little-endian, fields in this order:
//!
//! ```text
//! magic "TADAKV1"
//! u32 num_heads, u32 head_dim, u32 residual_length, u8 bits
//! u64 compressed_tokens (n)
//! f32[n * head_dim] k_mean, f32[n * head_dim] v_mean
//! k deviations, v deviations:  u64 code_bytes, u8[code_bytes] codes,
//!                              f32[n * heads] scales, f32[n * heads] mins
//! u64 residual_tokens (r)
//! f32[r * heads * head_dim] residual_k, then residual_v
//! ```

use super::LayerCache;
use crate::error::{Error, Result};
use crate::quant::{BitWidth, QuantizedDeviation};

pub const CACHE_MAGIC: &[u8; 7] = b"TADAKV1";

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_dev(out: &mut Vec<u8>, q: &QuantizedDeviation) {
    out.extend_from_slice(&(q.codes().len() as u64).to_le_bytes());
    out.extend_from_slice(q.codes());
    put_f32s(out, q.scales());
    put_f32s(out, q.mins());
}

pub fn serialize_cache(cache: &LayerCache) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(cache.num_heads as u32).to_le_bytes());
    out.extend_from_slice(&(cache.head_dim as u32).to_le_bytes());
    out.extend_from_slice(&(cache.residual_length as u32).to_le_bytes());
    out.push(cache.bits.bits());
    out.extend_from_slice(&(cache.compressed_tokens() as u64).to_le_bytes());
    put_f32s(&mut out, &cache.k_mean);
    put_f32s(&mut out, &cache.v_mean);
    put_dev(&mut out, &cache.k_dev);
    put_dev(&mut out, &cache.v_dev);
    out.extend_from_slice(&(cache.residual_count() as u64).to_le_bytes());
    put_f32s(&mut out, &cache.residual_k);
    put_f32s(&mut out, &cache.residual_v);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("stream truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} overflows")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("float count overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dev(&mut self, bits: BitWidth, heads: usize, head_dim: usize, groups: usize) -> Result<QuantizedDeviation> {
        let code_bytes = self.u64()?;
        let codes = self.take(code_bytes)?.to_vec();
        let scales = self.f32s(groups)?;
        let mins = self.f32s(groups)?;
        QuantizedDeviation::from_parts(bits, heads, head_dim, codes, scales, mins)
    }
}

fn mul(a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Format("dimension product overflows".into()))
}

/// Parses a TADAKV1 stream. Any truncation, trailing data or inconsistent
/// field yields a format error and no cache.
pub fn deserialize_cache(bytes: &[u8]) -> Result<LayerCache> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CACHE_MAGIC.len()).ok() != Some(&CACHE_MAGIC[..]) {
        return Err(Error::Format("missing TADAKV1 magic".into()));
    }
    let heads = r.u32()?;
    let head_dim = r.u32()?;
    let residual_length = r.u32()?;
    let bits = BitWidth::try_from(r.u8()?).map_err(|e| Error::Format(e.to_string()))?;
    if heads == 0 || head_dim == 0 {
        return Err(Error::Format("zero heads or head_dim".into()));
    }
    let n = r.u64()?;
    let k_mean = r.f32s(mul(n, head_dim)?)?;
    let v_mean = r.f32s(mul(n, head_dim)?)?;
    let groups = mul(n, heads)?;
    let k_dev = r.dev(bits, heads, head_dim, groups)?;
    let v_dev = r.dev(bits, heads, head_dim, groups)?;
    let residual = r.u64()?;
    let stride = mul(heads, head_dim)?;
    let residual_k = r.f32s(mul(residual, stride)?)?;
    let residual_v = r.f32s(mul(residual, stride)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after cache",
            bytes.len() - r.pos
        )));
    }
    LayerCache::from_parts(residual_length, k_mean, v_mean, k_dev, v_dev, residual_k, residual_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gaussian_tensor;
    use proptest::prelude::*;

    #[test]
    fn empty_cache_round_trip() {
        let c = LayerCache::new(2, 8, 4, BitWidth::Four);
        let bytes = serialize_cache(&c);
        assert_eq!(&bytes[..7], b"TADAKV1");
        assert_eq!(deserialize_cache(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_bad_streams() {
        let mut c = LayerCache::new(2, 8, 3, BitWidth::Two);
        let x = gaussian_tensor(1, vec![5, 2, 8], 1.0);
        c.append_tokens(&x, &x).unwrap();
        let bytes = serialize_cache(&c);
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert_eq!(deserialize_cache(&bytes[..cut]).unwrap_err().kind(), "format");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(deserialize_cache(&bad).is_err());
        let mut bad = bytes.clone();
        bad[6] = b'2';
        assert!(deserialize_cache(&bad).is_err());
        let mut bad = bytes.clone();
        bad[7 + 12] = 3; // bit width
        assert!(deserialize_cache(&bad).is_err());
        let mut bad = bytes;
        bad.push(0);
        assert!(deserialize_cache(&bad).is_err());
    }

    proptest! {
        #[test]
        fn populated_round_trip(seed: u64, tokens in 0usize..20, r in 0usize..6, bits_idx in 0usize..4) {
            let bits = BitWidth::ALL[bits_idx];
            let mut c = LayerCache::new(3, 6, r, bits);
            if tokens > 0 {
                let k = gaussian_tensor(seed, vec![tokens, 3, 6], 2.0);
                let v = gaussian_tensor(seed.wrapping_add(1), vec![tokens, 3, 6], 2.0);
                c.append_tokens(&k, &v).unwrap();
            }
            let bytes = serialize_cache(&c);
            let back = deserialize_cache(&bytes).unwrap();
            prop_assert_eq!(serialize_cache(&back), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
