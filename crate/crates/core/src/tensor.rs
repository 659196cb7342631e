//! Dense row-major tensors.
//!
//! [`Tensor`] holds `f64` data and [`CTensor`] holds `Complex64`. Binary
//! arithmetic requires identical shapes; the only broadcast is
//! scalar-with-tensor via [`Tensor::scale`] and [`Tensor::add_scalar`].

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real64,
    Complex128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_extents(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape { op, msg: format!("zero extent in {shape:?}") });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_extents("Tensor::new", &shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape { op: "Tensor::new", msg: format!("shape {shape:?} needs {n} elements, got {}", data.len()) });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on zero extents; intended for shapes known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_extents("Tensor::full", shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_extents("Tensor::from_fn", shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_extents("reshape", shape)?;
        if n != self.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", left: self.shape.clone(), right: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|x| x + s)
    }

    /// `self + s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn l1_mean(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "l1_mean")?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.numel() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_with(other, Exec::Parallel)
    }

    pub fn matmul_with(&self, other: &Tensor, exec: Exec) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: other.shape.clone() });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(exec, m, k, n, &self.data, &other.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape { op: "transpose2", msg: format!("expected rank 2, got {:?}", self.shape) });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn to_complex(&self) -> CTensor {
        CTensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| Complex64::new(x, 0.0)).collect() }
    }
}

/// `out += a[m,k] * b[k,n]`, row-parallel.
pub(crate) fn gemm(exec: Exec, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let exec = if m * k * n < 32 * 1024 { Exec::Sequential } else { exec };
    par::for_each_chunk(exec, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_bt(exec: Exec, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let exec = if m * k * n < 32 * 1024 { Exec::Sequential } else { exec };
    par::for_each_chunk(exec, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    });
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_at(exec: Exec, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let exec = if m * k * n < 32 * 1024 { Exec::Sequential } else { exec };
    par::for_each_chunk(exec, out, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        let n = check_extents("CTensor::new", &shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape { op: "CTensor::new", msg: format!("shape {shape:?} needs {n} elements, got {}", data.len()) });
        }
        Ok(CTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_extents("CTensor::zeros", shape).expect("valid shape");
        CTensor { shape: shape.to_vec(), data: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn re(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|z| z.re).collect() }
    }

    pub fn abs(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|z| z.norm()).collect() }
    }

    pub fn max_abs_diff(&self, other: &CTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op: "max_abs_diff", left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let mut bt = vec![0.0; 4];
        let b_t = b.transpose2().unwrap();
        gemm_bt(Exec::Sequential, 2, 3, 2, a.data(), b_t.data(), &mut bt);
        assert_eq!(bt, c.data());
        let mut at = vec![0.0; 4];
        let a_t = a.transpose2().unwrap();
        gemm_at(Exec::Sequential, 3, 2, 2, a_t.data(), b.data(), &mut at);
        assert_eq!(at, c.data());
    }
}
