//! Dense row-major `f64` tensors.
//!
//! Everything in the pipeline (including complex signals, which are split
//! into real/imaginary planes) is stored as a [`Tensor`]. Shapes are checked
//! at operation boundaries; matmul is delegated to ndarray's dgemm.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} does not fit {} values",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c));
        let data = rows.iter().flatten().copied().collect();
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (vectors count as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.data).unwrap()
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = (self.rows(), self.cols());
        ArrayViewMut2::from_shape((r, c), &mut self.data).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// C = A·B via dgemm. Shapes must conform.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(vec![a.rows(), b.cols()]);
    ndarray::linalg::general_mat_mul(1.0, &a.view2(), &b.view2(), 0.0, &mut out.view2_mut());
    out
}

/// C = Aᵀ·B.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "matmul_tn dimension mismatch");
    let mut out = Tensor::zeros(vec![a.cols(), b.cols()]);
    ndarray::linalg::general_mat_mul(
        1.0,
        &a.view2().reversed_axes(),
        &b.view2(),
        0.0,
        &mut out.view2_mut(),
    );
    out
}

/// C = A·Bᵀ.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "matmul_nt dimension mismatch");
    let mut out = Tensor::zeros(vec![a.rows(), b.rows()]);
    ndarray::linalg::general_mat_mul(
        1.0,
        &a.view2(),
        &b.view2().reversed_axes(),
        0.0,
        &mut out.view2_mut(),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // naive oracle
        fn naive(a: &Tensor, b: &Tensor) -> Tensor {
            let mut out = Tensor::zeros(vec![a.rows(), b.cols()]);
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.cols() {
                        acc += a.at(i, k) * b.at(k, j);
                    }
                    out.set(i, j, acc);
                }
            }
            out
        }
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a = Tensor::new(vec![3, 5], (0..15).map(|_| next()).collect()).unwrap();
        let b = Tensor::new(vec![5, 4], (0..20).map(|_| next()).collect()).unwrap();
        let c = matmul(&a, &b);
        let o = naive(&a, &b);
        for (x, y) in c.values().iter().zip(o.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let tn = matmul_tn(&a, &b); // (2x3)·(3x2)
        assert_eq!(tn.shape(), &[2, 2]);
        assert!((tn.at(0, 0) - (1.0 - 3.0 + 0.0)).abs() < 1e-12);
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let nt = matmul_nt(&a, &c); // (3x2)·(2x2)ᵀ
        assert_eq!(nt.shape(), &[3, 2]);
        assert!((nt.at(0, 0) - (1.0 + 4.0)).abs() < 1e-12);
    }
}
