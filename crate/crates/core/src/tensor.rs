//! Dense row-major tensors generic over element precision.
//!
//! Single precision is the training default; gradient checks run in double
//! because finite differences are unreliable in f32. All reductions sum
//! left-to-right so repeated runs are bitwise identical.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// 1 x n row vector.
    pub fn row_vector(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interpret as a matrix. 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let (_, cols) = self.dims2();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        let (_, cols) = self.dims2();
        self.data[i * cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let (_, cols) = self.dims2();
        self.data[i * cols + j] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert element precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

/// c = a x b with optional transposes. Inner summation always runs over
/// ascending k, so results do not depend on the loop nest chosen per case.
pub fn matmul<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Tensor<S>> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k1) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(Error::ShapeMismatch {
            op: format!("matmul(ta={transpose_a}, tb={transpose_b})"),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let k = k1;
    let mut out = vec![S::zero(); m * n];
    match (transpose_a, transpose_b) {
        (false, false) => {
            // ikj: row of c accumulated in k-ascending order.
            for i in 0..m {
                let a_row = &a.data[i * k..(i + 1) * k];
                let c_row = &mut out[i * n..(i + 1) * n];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b.data[kk * n..(kk + 1) * n];
                    for (c, &bkj) in c_row.iter_mut().zip(b_row.iter()) {
                        *c += aik * bkj;
                    }
                }
            }
        }
        (false, true) => {
            // rows of a against rows of b: contiguous dot products.
            for i in 0..m {
                let a_row = &a.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let b_row = &b.data[j * k..(j + 1) * k];
                    let mut acc = S::zero();
                    for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                        acc += x * y;
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            // k-outer loop; each c element still accumulates in ascending k.
            for kk in 0..k {
                let a_row = &a.data[kk * m..(kk + 1) * m];
                let b_row = &b.data[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let aki = a_row[i];
                    let c_row = &mut out[i * n..(i + 1) * n];
                    for (c, &bkj) in c_row.iter_mut().zip(b_row.iter()) {
                        *c += aki * bkj;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = S::zero();
                    for kk in 0..k {
                        acc += a.data[kk * m + i] * b.data[j * k + kk];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![1.0f32; 5]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &i, false, false).unwrap(), a);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let nn = matmul(&a, &b, false, false).unwrap();

        let at = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let bt = Tensor::matrix(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(matmul(&at, &b, true, false).unwrap(), nn);
        assert_eq!(matmul(&a, &bt, false, true).unwrap(), nn);
        assert_eq!(matmul(&at, &bt, true, true).unwrap(), nn);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0f32; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0f32; 4]).unwrap();
        assert!(matmul(&a, &b, false, false).is_err());
    }
}
