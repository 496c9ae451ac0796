//! Dense row-major `f64` tensors and the forward kernels used by the tape.
//!
//! Every kernel accumulates serially in a fixed order, so identical inputs
//! always produce bitwise-identical outputs.

use std::fmt;

use crate::error::{HstaError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HstaError::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(HstaError::dim("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    /// A single-row matrix `[1 × n]`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (the last extent).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(HstaError::dim("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(HstaError::dim(op, other, &[0, 0])),
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(HstaError::dim("matmul", &a.shape, &b.shape));
    }
    Ok(gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1)))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul_t")?;
    let (n, k2) = b.matrix_dims("matmul_t")?;
    if k != k2 {
        return Err(HstaError::dim("matmul_t", &a.shape, &b.shape));
    }
    Ok(gemm(m, k, n, &a.data, (k, 1), &b.data, (1, k)))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn t_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.matrix_dims("t_matmul")?;
    let (k2, n) = b.matrix_dims("t_matmul")?;
    if k != k2 {
        return Err(HstaError::dim("t_matmul", &a.shape, &b.shape));
    }
    Ok(gemm(m, k, n, &a.data, (1, m), &b.data, (n, 1)))
}

/// `[m×k]·[k×n]` with explicit (row, column) strides for both operands.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Tensor {
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides and extents describe the checked, contiguous
        // buffers of `a` (m×k), `b` (k×n) and `out` (m×n).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.matrix_dims("softmax_rows")?;
    let mut out = x.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
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
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Per-row normalization statistics: returns `(x̂, 1/σ)` with `σ = sqrt(var + eps)`.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (m, d) = x.matrix_dims("layer_norm")?;
    let mut xhat = x.data.clone();
    let mut rstd = Vec::with_capacity(m);
    for i in 0..m {
        let row = &mut xhat[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    Ok((
        Tensor {
            shape: vec![m, d],
            data: xhat,
        },
        rstd,
    ))
}

/// Layer normalization over the last extent followed by an affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(HstaError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(HstaError::dim("layer_norm", &x.shape, &gamma.shape));
    }
    let (mut y, _) = normalize_rows(x, eps)?;
    for row in y.data.chunks_mut(d.max(1)) {
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

/// Stacks `b` below `a`.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, d) = a.matrix_dims("concat_rows")?;
    let (q, d2) = b.matrix_dims("concat_rows")?;
    if d != d2 {
        return Err(HstaError::dim("concat_rows", &a.shape, &b.shape));
    }
    let mut data = Vec::with_capacity((p + q) * d);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        shape: vec![p + q, d],
        data,
    })
}

/// Places `b` to the right of `a`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.matrix_dims("concat_cols")?;
    let (m2, q) = b.matrix_dims("concat_cols")?;
    if m != m2 {
        return Err(HstaError::dim("concat_cols", &a.shape, &b.shape));
    }
    let mut data = Vec::with_capacity(m * (p + q));
    for i in 0..m {
        data.extend_from_slice(&a.data[i * p..(i + 1) * p]);
        data.extend_from_slice(&b.data[i * q..(i + 1) * q]);
    }
    Ok(Tensor {
        shape: vec![m, p + q],
        data,
    })
}

/// Rows `start..start+len` of a matrix.
pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, d) = x.matrix_dims("slice_rows")?;
    if start + len > m {
        return Err(HstaError::dim("slice_rows", &x.shape, &[start + len, d]));
    }
    Ok(Tensor {
        shape: vec![len, d],
        data: x.data[start * d..(start + len) * d].to_vec(),
    })
}

/// Splits a matrix into its first `p` rows and the remainder.
pub fn split_rows(x: &Tensor, p: usize) -> Result<(Tensor, Tensor)> {
    let m = x.matrix_dims("split_rows")?.0;
    if p > m {
        return Err(HstaError::dim("split_rows", &x.shape, &[p]));
    }
    Ok((slice_rows(x, 0, p)?, slice_rows(x, p, m - p)?))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
