//! Dense row-major f32 tensors and the few kernels the decoder needs:
//! matrix multiply, row softmax and rotary position embedding.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(shape_err("tensor needs at least one dimension"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            d => self.data.len() / d,
        }
    }

    /// Row `i` of the `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius norm of `self - other`, accumulated in f64.
    pub fn frobenius_distance(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "frobenius distance between {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(frobenius_distance(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub(crate) fn frobenius_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `out = row · b` for a row-major `b` of shape `[row.len(), out.len()]`.
///
/// Every output element accumulates in ascending inner-index order; the fused
/// compression kernels rely on this to match [`matmul`] bit for bit.
pub(crate) fn row_times_matrix(row: &[f32], b: &[f32], out: &mut [f32]) {
    let n = out.len();
    out.fill(0.0);
    for (k, &a) in row.iter().enumerate() {
        let b_row = &b[k * n..(k + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(shape_err(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        row_times_matrix(&a.data[i * k..(i + 1) * k], &b.data, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax of a single row in place, using max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if row.is_empty() {
        return;
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / sum) as f32;
    }
}

/// Row-wise softmax over the trailing dimension.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if !a.all_finite() {
        return Err(Error::Data("softmax input contains non-finite values".into()));
    }
    let mut out = a.clone();
    let d = out.last_dim();
    if d > 0 {
        for row in out.data.chunks_mut(d) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding geometry: adjacent pairs `(2j, 2j+1)` rotate by
/// `position * base^(-2j / head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let params = Self { head_dim, base };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("rope base must be > 0, got {}", self.base)));
        }
        Ok(())
    }

    fn inv_freq(&self, pair: usize) -> f64 {
        self.base.powf(-((2 * pair) as f64) / self.head_dim as f64)
    }
}

/// Rotates one `head_dim` row in place for the given position.
pub(crate) fn rotate_row(row: &mut [f32], position: usize, params: &RopeParams) {
    for j in 0..row.len() / 2 {
        let angle = position as f64 * params.inv_freq(j);
        let (sin, cos) = angle.sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (x0, x1) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = x0 * cos - x1 * sin;
        row[2 * j + 1] = x0 * sin + x1 * cos;
    }
}

/// Applies RoPE to `x` of shape `[tokens, ..., head_dim]`; every row of token
/// `t` rotates by `positions[t]`.
pub fn apply_rope(x: &Tensor, positions: &[usize], params: &RopeParams) -> Result<Tensor> {
    params.validate()?;
    if x.last_dim() != params.head_dim {
        return Err(shape_err(format!(
            "rope expects head_dim {}, tensor trailing dim is {}",
            params.head_dim,
            x.last_dim()
        )));
    }
    let tokens = x.shape()[0];
    if x.shape().len() < 2 || positions.len() != tokens {
        return Err(shape_err(format!(
            "rope needs one position per token row: shape {:?}, {} positions",
            x.shape(),
            positions.len()
        )));
    }
    let mut out = x.clone();
    let per_token = out.len().checked_div(tokens).unwrap_or(0);
    if per_token > 0 {
        for (chunk, &pos) in out.data.chunks_mut(per_token).zip(positions) {
            for row in chunk.chunks_mut(params.head_dim) {
                rotate_row(row, pos, params);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let out = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::from_fn(vec![5, 7], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![7, 3], |_| rng.random_range(-1.0..1.0));
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert!((got.data()[i * 3 + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        assert_eq!(err.kind(), "shape");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[0.0, 3.0f32.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn rope_examples() {
        let p = RopeParams::new(2, 123.0).unwrap();
        let out = apply_rope(&t(&[1, 2], &[1.0, 0.0]), &[1], &p).unwrap();
        assert!((out.data()[0] - 1f32.cos()).abs() < 1e-7);
        assert!((out.data()[1] - 1f32.sin()).abs() < 1e-7);

        let x = t(&[1, 4], &[0.3, -1.2, 4.0, 2.5]);
        let p = RopeParams::new(4, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(apply_rope(&x, &[0], &p).unwrap(), x);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert_eq!(RopeParams::new(3, 10_000.0).unwrap_err().kind(), "config");
        let p = RopeParams { head_dim: 3, base: 10_000.0 };
        assert!(apply_rope(&Tensor::zeros(vec![1, 3]), &[0], &p).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, seed: u64, spread in 0.1f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-spread..spread));
            let s = softmax_rows(&a).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().map(|&p| p as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn rope_preserves_row_norms(tokens in 1usize..5, half in 1usize..16, seed: u64) {
            let d = 2 * half;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(vec![tokens, d], |_| rng.random_range(-3.0..3.0));
            let positions: Vec<usize> = (0..tokens).map(|_| rng.random_range(0..4096)).collect();
            let out = apply_rope(&x, &positions, &RopeParams::new(d, DEFAULT_ROPE_BASE).unwrap()).unwrap();
            for r in 0..tokens {
                let n0: f64 = x.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let n1: f64 = out.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((n0 - n1).abs() <= 1e-5 * n0.max(1e-12));
            }
        }

        #[test]
        fn rope_position_zero_is_identity(half in 1usize..16, seed: u64) {
            let d = 2 * half;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(vec![1, d], |_| rng.random_range(-3.0..3.0));
            let out = apply_rope(&x, &[0], &RopeParams::new(d, DEFAULT_ROPE_BASE).unwrap()).unwrap();
            prop_assert_eq!(out, x);
        }
    }
}
