//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer. Rank-0 tensors hold a single
//! value. Every constructor checks that the buffer length matches the shape
//! and that all values are finite.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EetError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(EetError::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EetError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EetError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape must already be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(EetError::NonFinite { op })
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(EetError::contract("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub(crate) fn require2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(EetError::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2().expect("rank-2 tensor");
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("rank-2 tensor");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(EetError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require2("matmul")?;
        let (k2, n) = other.require2("matmul")?;
        if k != k2 {
            return Err(EetError::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(&self.data, m, k),
            Operand::plain(&other.data, k, n),
            &mut out,
            false,
        );
        Tensor::from_parts(vec![m, n], out).checked("matmul")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A matrix view for [`gemm`], optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    /// `data` holds a `rows × cols` row-major matrix.
    pub(crate) fn plain(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// `data` holds a `cols × rows` row-major matrix, read as its transpose.
    pub(crate) fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output extent");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents were asserted above; strides describe the row-major
    // buffers exactly and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Iteration geometry for a reduction along one axis: `(outer, len, inner)`.
pub(crate) fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, shifted by the per-slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(EetError::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(EetError::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = axis_geometry(&x.shape, axis);
    let mut out = vec![0.0; x.data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let max = (0..len)
                .map(|i| x.data[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x.data[idx(i)] - max).exp();
                out[idx(i)] = e;
                sum += e;
            }
            for i in 0..len {
                out[idx(i)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Row-wise softmax restricted to the `allowed` entries; other entries are
/// exactly zero. Every row must allow at least one entry.
pub(crate) fn masked_softmax_rows(
    x: &[f64],
    allowed: &[bool],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mask = &allowed[r * cols..(r + 1) * cols];
        let ys = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in xs.iter().zip(mask) {
            if m && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for ((y, v), &m) in ys.iter_mut().zip(xs).zip(mask) {
            if m {
                *y = (v - max).exp();
                sum += *y;
            }
        }
        for (y, &m) in ys.iter_mut().zip(mask) {
            if m {
                *y /= sum;
            }
        }
    }
    out
}
