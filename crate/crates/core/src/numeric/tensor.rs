use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Values are immutable once built; every op returns a fresh tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
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

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[prod(leading), last_dim]`.
    pub fn num_rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha * a·b + beta * c` on strided row/column views.
///
/// Thin safe wrapper over `matrixmultiply::dgemm`; strides must be
/// non-negative and every addressed element must lie inside its slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    }
    assert!(reach(m, k, a.1, a.2) <= a.0.len(), "gemm: lhs out of bounds");
    assert!(reach(k, n, b.1, b.2) <= b.0.len(), "gemm: rhs out of bounds");
    assert!(reach(m, n, c.1, c.2) <= c.0.len(), "gemm: out out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.0[i * c.1 + j * c.2];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: bounds of all three views were checked above and the output
    // slice is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        (a.data(), k, 1),
        (b.data(), n, 1),
        0.0,
        (&mut out, n, 1),
    );
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// Additive bias used to realize forbidden attention cells.
pub const MASK_NEG: f64 = -1e30;

/// Row-wise softmax over the trailing axis, restricted to permitted cells.
///
/// Forbidden cells receive `MASK_NEG` before normalization and come out as
/// exactly zero. A row with no permitted cell is an error.
pub fn softmax_masked(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != logits.len() {
        return Err(Error::shape(
            "softmax_masked",
            format!("mask has {} cells, logits {}", mask.len(), logits.len()),
        ));
    }
    let n = logits.last_dim();
    let mut out = logits.data().to_vec();
    for (r, (row, mrow)) in out.chunks_mut(n).zip(mask.chunks(n)).enumerate() {
        if !mrow.iter().any(|&m| m) {
            return Err(Error::FullyMaskedRow { row: r });
        }
        softmax_row_in_place(row, mrow);
    }
    Tensor::new(logits.shape().to_vec(), out)?.ensure_finite("softmax_masked")
}

pub(crate) fn softmax_row_in_place(row: &mut [f64], mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in row.iter_mut().zip(mask) {
        if !m {
            *v += MASK_NEG;
        }
        max = max.max(*v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn row_by_column() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let t = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let p = softmax_masked(&t, &[true; 3]).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ignores_masked_max() {
        let t = Tensor::new(vec![3], vec![5.0, 0.0, 0.0]).unwrap();
        let p = softmax_masked(&t, &[false, true, true]).unwrap();
        assert_eq!(p.data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn softmax_two_logits() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let p = softmax_masked(&t, &[true, true]).unwrap();
        // e^1 / (e^1 + e^2) = 1 / (1 + e)
        let lo = 1.0 / (1.0 + std::f64::consts::E);
        assert!((p.data()[0] - lo).abs() < 1e-15);
        assert!((p.data()[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((p.data()[1] - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = softmax_masked(&t, &[true, true, false, false]).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }
}
