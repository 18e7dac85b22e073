//! Dense row-major `f64` tensors and the forward kernels the rest of the
//! crate is built from.
//!
//! Every reduction runs in ascending index order, so two calls with the same
//! inputs produce bit-identical outputs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If `shape` has a zero extent or is empty.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Interprets the tensor as `rows × last_dim`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                acc * n + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v.abs())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the largest element; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2, "transpose_last needs rank >= 2");
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.data.len() / (m * n);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = self.data[base + i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Tensor { shape, data: out }
    }

    /// Sums a rank-2 tensor over its rows.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.last_dim();
        let mut out = vec![0.0; c];
        for r in 0..self.rows() {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor::from_vec(out)
    }

    /// Mean over the leading axis of a rank-3 tensor (`h × m × n → m × n`).
    pub fn mean_leading(&self) -> Tensor {
        assert_eq!(self.rank(), 3, "mean_leading needs rank 3");
        let (h, m, n) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; m * n];
        for k in 0..h {
            for (o, &v) in out.iter_mut().zip(&self.data[k * m * n..(k + 1) * m * n]) {
                *o += v;
            }
        }
        let inv = h as f64;
        Tensor {
            shape: vec![m, n],
            data: out.into_iter().map(|v| v / inv).collect(),
        }
    }
}

/// Matrix product. Rank-2 operands give the usual product; rank-3 operands
/// with equal leading extent are multiplied batch by batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; m * n];
            gemm(&a.data, &b.data, &mut out, m, k, n);
            Ok(Tensor {
                shape: vec![m, n],
                data: out,
            })
        }
        (3, 3) => {
            let (h, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (h2, k2, n) = (b.shape[0], b.shape[1], b.shape[2]);
            if h != h2 || k != k2 {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; h * m * n];
            for batch in 0..h {
                gemm(
                    &a.data[batch * m * k..(batch + 1) * m * k],
                    &b.data[batch * k * n..(batch + 1) * k * n],
                    &mut out[batch * m * n..(batch + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Ok(Tensor {
                shape: vec![h, m, n],
                data: out,
            })
        }
        _ => Err(Error::shape("matmul", &a.shape, &b.shape)),
    }
}

// i-k-j loop: each output element accumulates its k terms in ascending order.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Softmax over the last axis, with the row maximum subtracted first.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

pub fn gelu_derivative(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv_std) = row_stats(x.row(r), eps);
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gamma.data[j] + beta.data[j];
        }
    }
    Ok(out)
}

pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().fold(0.0, |a, &v| a + v) / n;
    let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `x·w + bias`, with the bias broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let mut out = matmul(x, w)?;
    if let Some(b) = bias {
        let n = w.shape[1];
        if b.len() != n {
            return Err(Error::shape("linear", w.shape(), b.shape()));
        }
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
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

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn new_rejects_bad_lengths_and_zero_extents() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let i = Tensor::eye(2);
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                let got = c.get(&[i, j]);
                assert!((got - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn batched_matmul_matches_per_batch_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for h in 0..2 {
            let ah = Tensor::new(vec![3, 4], a.data()[h * 12..(h + 1) * 12].to_vec()).unwrap();
            let bh = Tensor::new(vec![4, 2], b.data()[h * 8..(h + 1) * 8].to_vec()).unwrap();
            assert_eq!(matmul(&ah, &bh).unwrap().data(), &c.data()[h * 6..(h + 1) * 6]);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_cases() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(add(&a, &Tensor::zeros(&[2])).unwrap(), a);
        let b = add(&Tensor::from_vec(vec![1.0, -1.0]), &Tensor::from_vec(vec![-1.0, 1.0])).unwrap();
        assert_eq!(b.data(), &[0.0, 0.0]);
        assert!(add(&a, &Tensor::zeros(&[3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4], &mut rng);
        let y = random(&[3, 4], &mut rng);
        let s = add(&x, &y).unwrap();
        for i in 0..12 {
            assert_eq!(s.data()[i], x.data()[i] + y.data()[i]);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::from_vec(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::from_vec(vec![1000.0, 1000.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::from_vec(vec![0.0, 3f64.ln()]));
        assert!(close(s.data()[0], 0.25, 1e-12) && close(s.data()[1], 0.75, 1e-12));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&Tensor::from_vec(vec![0.0])).data()[0], 0.0);
        assert!(gelu(&Tensor::from_vec(vec![-0.5])).data()[0] < 0.0);
        // Independent Φ(1): Simpson quadrature of the normal density on [0, 1].
        let n = 2000;
        let h = 1.0 / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        let phi1 = 0.5 + acc * h / 3.0;
        let g = gelu(&Tensor::from_vec(vec![1.0])).data()[0];
        assert!(close(g, phi1, 1e-9), "{g} vs {phi1}");
        assert!(close(g, 0.841_344_746_068_542_9, 1e-12));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let out = layer_norm(&Tensor::from_rows(&[&[2.0, 2.0, 2.0]]).unwrap(), &g, &b, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let out = layer_norm(
            &Tensor::from_rows(&[&[1.0, -1.0]]).unwrap(),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            1e-14,
        )
        .unwrap();
        assert!(close(out.data()[0], 1.0, 1e-9) && close(out.data()[1], -1.0, 1e-9));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 7], &mut rng);
        let out = layer_norm(&x, &Tensor::ones(&[7]), &Tensor::zeros(&[7]), 1e-12).unwrap();
        for r in 0..4 {
            let row = out.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 7.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(close(mean, 0.0, 1e-9) && close(var, 1.0, 1e-9));
        }
        assert!(layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[7]), 1e-5).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 4], &mut rng);
        assert_eq!(linear(&x, &Tensor::eye(4), Some(&Tensor::zeros(&[4]))).unwrap(), x);

        let bias = Tensor::from_vec(vec![1.0, -2.0]);
        let out = linear(&Tensor::zeros(&[3, 4]), &random(&[4, 2], &mut rng), Some(&bias)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), bias.data());
        }

        let w = random(&[4, 2], &mut rng);
        let expected = matmul(&x, &w).unwrap();
        let got = linear(&x, &w, Some(&bias)).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(got.get(&[r, c]), expected.get(&[r, c]) + bias.data()[c]);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[3, 2]), None).is_err());
    }

    #[test]
    fn transpose_last_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&[2, 3, 4], &mut rng);
        let t = x.transpose_last();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.get(&[1, 2, 0]), x.get(&[1, 0, 2]));
        assert_eq!(t.transpose_last(), x);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(values in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let s = softmax_lastdim(&Tensor::from_vec(values));
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn identity_products_are_exact(seed in 0u64..1000, m in 1usize..6, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, n], &mut rng);
            prop_assert_eq!(matmul(&Tensor::eye(m), &a).unwrap(), a.clone());
            prop_assert_eq!(matmul(&a, &Tensor::eye(n)).unwrap(), a);
        }

        #[test]
        fn kernels_are_pure(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, 5], &mut rng);
            let w = random(&[5, 2], &mut rng);
            prop_assert_eq!(linear(&x, &w, None).unwrap(), linear(&x, &w, None).unwrap());
            prop_assert_eq!(gelu(&x), gelu(&x));
            prop_assert_eq!(softmax_lastdim(&x), softmax_lastdim(&x));
        }
    }
}
