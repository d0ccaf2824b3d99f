//! Dense row-major `f64` tensors, a reverse-mode tape, and a finite-difference
//! gradient oracle.
//!
//! Everything the model touches is a 2-D matrix; scalars are `[1, 1]`.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use params::{ParamEntry, ParamStore, Partition};
pub use tape::{log_sigmoid, logsumexp, sigmoid, Gradients, ParamGrad, ParamId, Tape, Var};
pub(crate) use tape::rotate_pairs;

use crate::attention::MaskMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor".into() });
        }
        Ok(Self { shape, data })
    }

    /// Builds a matrix without validating finiteness. Callers guarantee
    /// `data.len() == rows * cols`.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { shape: vec![rows, cols], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::matrix(1, n, values)
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Ok(Tensor::from_parts(m, n, out))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(c, r, out)
    }

    pub(crate) fn check_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }
}

/// `c = a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; the strides address exactly the m*k, k*n and
    // m*n elements of the respective row-major or transposed views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax restricted to the entries permitted by `mask`.
///
/// Masked entries come out as exact zeros. The row maximum is taken over
/// permitted entries only, which matches adding a large negative constant to
/// masked logits before exponentiation.
pub fn row_softmax_masked(logits: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    let n = logits.rows();
    let m = logits.cols();
    if mask.len() != n || m != n {
        return Err(Error::shape(
            "row_softmax_masked",
            format!("logits [{n}x{m}] vs mask {0}x{0}", mask.len()),
        ));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = logits.row(i);
        let allowed = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if allowed[j] && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked { row: i });
        }
        let dst = &mut out[i * m..(i + 1) * m];
        let mut total = 0.0;
        for j in 0..m {
            if allowed[j] {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(n, m, out).check_finite("row_softmax_masked")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_parts(m, n, out)
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::identity(2);
        assert_eq!(i.matmul(&i).unwrap(), i);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn tensor_rejects_nan_and_bad_shape() {
        assert!(Tensor::matrix(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Tensor::matrix(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let full = MaskMatrix::from_fn(2, |_, _| true);
        let s = row_softmax_masked(&Tensor::zeros(2, 2), &full).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let mut m = MaskMatrix::from_fn(2, |_, _| true);
        m.set(0, 1, false);
        let x = Tensor::from_rows(&[vec![5.0, 100.0], vec![0.0, 0.0]]).unwrap();
        let s = row_softmax_masked(&x, &m).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);

        let m3 = MaskMatrix::from_fn(3, |_, _| true);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let s = row_softmax_masked(&x, &m3).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            assert!((s.get(0, j) - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let m = MaskMatrix::from_fn(2, |i, _| i == 0);
        let err = row_softmax_masked(&Tensor::zeros(2, 2), &m).unwrap_err();
        assert!(matches!(err, Error::AllMasked { row: 1 }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                vals in proptest::collection::vec(-30.0f64..30.0, 16),
                bits in proptest::collection::vec(any::<bool>(), 16),
                shift in -100.0f64..100.0,
            ) {
                let mask = MaskMatrix::from_fn(4, |i, j| i == j || bits[i * 4 + j]);
                let x = Tensor::matrix(4, 4, vals.clone()).unwrap();
                let shifted = Tensor::matrix(4, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
                let a = row_softmax_masked(&x, &mask).unwrap();
                let b = row_softmax_masked(&shifted, &mask).unwrap();
                for i in 0..4 {
                    let s: f64 = a.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    for j in 0..4 {
                        if !mask.get(i, j) {
                            prop_assert_eq!(a.get(i, j), 0.0);
                        }
                        prop_assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
