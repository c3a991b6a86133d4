//! Dense row-major `f32` tensors with the handful of kernels inference needs.
//!
//! Reductions always run in a fixed left-to-right order so every kernel is
//! bit-reproducible. Row operations (softmax, log-sum-exp) act on the trailing
//! axis; there is no general broadcasting.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive, got {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![n, k], rows.concat())
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

    /// Size of the trailing axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.row_len())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.row_len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Dimension(format!(
                "{what} must be 2-D, got shape {s:?}"
            ))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose operand")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Matrix product with each dot product summed left to right in `f32`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = rhs.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}: inner extents differ",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0.0f32;
                for (p, &av) in a.iter().enumerate() {
                    acc += av * rhs.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `x · wᵀ + b` for `x: [N×in]`, `w: [out×in]`, `b: [out]`.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, d_in) = self.dims2("affine input")?;
        let (d_out, w_in) = w.dims2("affine weight")?;
        if d_in != w_in || b.len() != d_out {
            return Err(Error::Dimension(format!(
                "affine of input {:?} with weight {:?} and bias {:?}",
                self.shape, w.shape, b.shape
            )));
        }
        let mut out = vec![0.0f32; n * d_out];
        for i in 0..n {
            let x = &self.data[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let wr = &w.data[o * d_in..(o + 1) * d_in];
                let mut acc = 0.0f32;
                for (xv, wv) in x.iter().zip(wr) {
                    acc += xv * wv;
                }
                out[i * d_out + o] = acc + b.data[o];
            }
        }
        Self::new(vec![n, d_out], out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
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

    /// Softmax over the trailing axis, max-shifted.
    pub fn softmax(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            softmax_row_into(row, &mut data);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// `log Σ exp` over the trailing axis; the result drops that axis
    /// (a 1-D input yields shape `[1]`).
    pub fn log_sum_exp(&self) -> Tensor {
        let data: Vec<f32> = self.rows().map(|r| log_sum_exp(r) as f32).collect();
        let shape = if self.shape.len() > 1 {
            self.shape[..self.shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        Tensor { shape, data }
    }
}

/// Max-shifted log-sum-exp of one row, accumulated in `f64`.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Same as [`log_sum_exp`] for rows already held in `f64`.
pub fn log_sum_exp_f64(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn softmax_row_into(row: &[f32], out: &mut Vec<f32>) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    out.extend(exps.iter().map(|e| (e / sum) as f32));
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
