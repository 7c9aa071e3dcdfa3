//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor extents must all be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a tensor viewed as a matrix over its last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Contiguous block of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    /// Append zero rows until the tensor has `rows` rows.
    pub fn pad_rows(&self, rows: usize) -> Tensor {
        let c = self.cols();
        let mut data = self.data.clone();
        data.resize(rows * c, 0.0);
        Tensor {
            shape: vec![rows, c],
            data,
        }
    }
}

pub(crate) fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, t.shape(), &[]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `c (+)= op(a) · op(b)` on raw buffers; transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // op(a) is m×k, op(b) is k×n.
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are checked by the debug assertions.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, true, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// Softmax over the trailing axis with max-shift.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub const PROB_EPS: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Logistic function, evaluated without overflow and clamped to `[1e-12, 1 - 1e-12]`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    clamp_prob(s)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Strided 1-D convolution with zero padding of `w / 2` on both ends.
/// `x` is T×D, `kernel` is w×D×D' and the result is ⌈T/stride⌉×D'.
pub fn conv1d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, d, w, d_out) = conv_dims(x, kernel, stride)?;
    let t_out = t.div_ceil(stride);
    let half = w / 2;
    let mut out = vec![0.0; t_out * d_out];
    for o in 0..t_out {
        let centre = o * stride;
        for j in 0..w {
            let src = centre as isize + j as isize - half as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            gemm(
                1,
                d,
                d_out,
                &x.data[src * d..(src + 1) * d],
                false,
                &kernel.data[j * d * d_out..(j + 1) * d * d_out],
                false,
                &mut out[o * d_out..(o + 1) * d_out],
                true,
            );
        }
    }
    Tensor::matrix(t_out, d_out, out)
}

pub(crate) fn conv_dims(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (t, d) = require_matrix("conv1d", x)?;
    if kernel.rank() != 3 || kernel.shape[1] != d {
        return Err(Error::dim("conv1d", x.shape(), kernel.shape()));
    }
    let w = kernel.shape[0];
    if w.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "conv1d kernel width must be odd, got {w}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv1d stride must be positive".into()));
    }
    Ok((t, d, w, kernel.shape[2]))
}

/// Interpolation weights for endpoint-aligned resampling from `t` to `len` rows:
/// `(lo, hi, frac)` per output row.
pub(crate) fn upsample_taps(t: usize, len: usize) -> Vec<(usize, usize, f64)> {
    (0..len)
        .map(|i| {
            if t == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let coord = (i * (t - 1)) as f64 / (len - 1) as f64;
            let lo = (coord.floor() as usize).min(t - 1);
            let frac = coord - lo as f64;
            let hi = (lo + 1).min(t - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Endpoint-aligned linear interpolation along the time axis.
pub fn upsample_linear(x: &Tensor, target_len: usize) -> Result<Tensor> {
    let (t, d) = require_matrix("upsample_linear", x)?;
    if target_len == 0 {
        return Err(Error::Config(
            "upsample target length must be positive".into(),
        ));
    }
    let mut out = vec![0.0; target_len * d];
    for (i, (lo, hi, frac)) in upsample_taps(t, target_len).into_iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        if frac == 0.0 {
            row.copy_from_slice(&x.data[lo * d..(lo + 1) * d]);
        } else {
            let (a, b) = (&x.data[lo * d..(lo + 1) * d], &x.data[hi * d..(hi + 1) * d]);
            for ((o, a), b) in row.iter_mut().zip(a).zip(b) {
                *o = (1.0 - frac) * a + frac * b;
            }
        }
    }
    Tensor::matrix(target_len, d, out)
}
