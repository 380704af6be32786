//! Dense row-major `f64` tensors and the forward kernels shared by the tape.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! axis), so identical inputs always produce bit-identical outputs no matter
//! how rows are batched together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision for a run. `F32` rounds every primitive's output to
/// single precision; arithmetic is still carried out in `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_parts(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum();
        self.data[offset]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        assert_eq!(index.len(), self.shape.len());
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum();
        self.data[offset] = value;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps only the listed positions along `axis`, in the given order.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::InvalidTensor(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&i| i >= extent) {
            return Err(Error::InvalidTensor(format!(
                "index {bad} out of range for axis {axis} of extent {extent}"
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * extent + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor::new(shape, data)
    }

    /// Removes the listed positions along `axis`.
    pub fn remove(&self, axis: usize, drop: &[usize]) -> Result<Tensor> {
        let extent = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::InvalidTensor(format!("axis {axis} out of range")))?;
        let mut dropped = vec![false; extent];
        for &i in drop {
            if i >= extent {
                return Err(Error::InvalidTensor(format!(
                    "index {i} out of range for axis {axis} of extent {extent}"
                )));
            }
            dropped[i] = true;
        }
        let keep: Vec<usize> = (0..extent).filter(|&i| !dropped[i]).collect();
        self.select(axis, &keep)
    }

    /// Sets every entry at position `index` along `axis` to zero.
    pub fn zero_slice(&mut self, axis: usize, index: usize) {
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        for o in 0..outer {
            let start = (o * extent + index) * inner;
            self.data[start..start + inner].fill(0.0);
        }
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Gathers entries of the leading axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_parts(shape, data)
    }

    /// Inserts a leading axis of extent 1.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Tensor::from_parts(shape, self.data.clone())
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Standard matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    kernels::matmul(&a.data, &b.data, m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Layer normalization over the last axis (biased variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    let rows = x.numel() / d;
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    kernels::layer_norm(&x.data, &gamma.data, &beta.data, d, eps, &mut out, &mut mean, &mut rstd);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.data.clone();
    for row in out.chunks_mut(x.last_dim()) {
        kernels::softmax_inplace(row);
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.data.clone();
    for row in out.chunks_mut(x.last_dim()) {
        kernels::log_softmax_inplace(row);
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::from_parts(x.shape.clone(), data)
}

pub(crate) mod kernels {
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    /// `out[m×n] = a[m×k] · b[k×n]`, accumulating over k in increasing order.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    /// `y[m×out] = x[m×in] · wᵀ + b` with `w` stored `[out×in]`.
    pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, m: usize, d_in: usize, d_out: usize) -> Vec<f64> {
        let wt = transpose(w, d_out, d_in);
        let mut y = vec![0.0; m * d_out];
        matmul(x, &wt, m, d_in, d_out, &mut y);
        if let Some(b) = b {
            for row in y.chunks_mut(d_out) {
                for (v, &bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn layer_norm(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        d: usize,
        eps: f64,
        out: &mut [f64],
        mean: &mut [f64],
        rstd: &mut [f64],
    ) {
        for (r, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
    }

    pub fn softmax_inplace(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    pub fn log_softmax_inplace(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }

    #[inline]
    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
    }

    #[inline]
    pub fn gelu_grad(x: f64) -> f64 {
        let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
        let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        cdf + x * pdf
    }
}
