//! Dense row-major tensors generic over the element type.
//!
//! The crate builds every numeric path twice, once per element type: f64 for
//! correctness work (equivalence and gradient tests) and f32 for throughput
//! work (training, benchmarks). The `Scalar` trait is the seam; picking the
//! type parameter picks the arithmetic width of the whole stack.

pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use num_traits::Float;

/// Element types the numeric stack can be instantiated with.
pub trait Scalar: Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static {
    /// Width in bytes; doubles as the dtype tag in serialized checkpoints.
    const BYTES: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const BYTES: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major tensor. The gradient buffer is populated only on tape
/// nodes that participated in a backward pass.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Input(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value], grad: None }
    }

    /// Normal(0, std) initialization from the given stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SplitMix64) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.normal() * std)).collect();
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut_or_init(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the tensor as a stack of rows over its last dimension.
    /// A 1-D tensor is a single row; higher ranks flatten leading dims.
    pub fn rows_over_last_dim(&self) -> Result<(usize, usize)> {
        let d = *self.shape.last().ok_or_else(|| {
            Error::Input("operation needs at least one dimension, got a 0-d tensor".into())
        })?;
        Ok((self.data.len() / d, d))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape { op, lhs: self.shape.clone(), rhs: vec![] });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// `a (m×k) · b (k×n)` as a standalone operation.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    kernels::matmul(a.data(), b.data(), m, ka, n, out.data_mut());
    Ok(out)
}

/// Row-wise RMS normalization with a learned gain vector.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (rows, d) = x.rows_over_last_dim()?;
    if gain.shape() != [d] {
        return Err(Error::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    for r in 0..rows {
        kernels::rms_norm_row(
            &x.data()[r * d..(r + 1) * d],
            gain.data(),
            eps,
            &mut out.data_mut()[r * d..(r + 1) * d],
        );
    }
    Ok(out)
}

/// Row-wise softmax. Rejects non-finite inputs rather than emitting NaNs.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (rows, d) = x.rows_over_last_dim()?;
    let mut out = x.clone();
    out.clear_grad();
    for r in 0..rows {
        kernels::softmax_row_in_place(&mut out.data_mut()[r * d..(r + 1) * d]);
    }
    Ok(out)
}

/// Gated linear unit: `(x·w_value) ⊙ sigmoid(x·w_gate)`.
pub fn glu<T: Scalar>(x: &Tensor<T>, w_value: &Tensor<T>, w_gate: &Tensor<T>) -> Result<Tensor<T>> {
    if w_value.shape() != w_gate.shape() {
        return Err(Error::Shape {
            op: "glu",
            lhs: w_value.shape().to_vec(),
            rhs: w_gate.shape().to_vec(),
        });
    }
    let mut value = matmul(x, w_value)?;
    let gate = matmul(x, w_gate)?;
    for (v, &g) in value.data_mut().iter_mut().zip(gate.data()) {
        *v = *v * kernels::sigmoid(g);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_disagreement() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(vec![4, 5]);
        let b = Tensor::<f64>::zeros(vec![4, 3]);
        let err = matmul(&a, &b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![4, 5]);
                assert_eq!(rhs, vec![4, 3]);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let x = Tensor::new(vec![3], vec![1.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x).unwrap_err(), Error::Numeric(_)));
        let x = Tensor::new(vec![3], vec![1.0, f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(softmax(&x).unwrap_err(), Error::Numeric(_)));
    }

    #[test]
    fn rms_norm_matches_hand_computation() {
        // x = [3, 4], rms = sqrt(25/2 + 0) = 3.5355..., gain doubles one lane.
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let gain = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let out = rms_norm(&x, &gain, 0.0).unwrap();
        let rms = (12.5f64).sqrt();
        assert!((out.data()[0] - 3.0 / rms).abs() < 1e-12);
        assert!((out.data()[1] - 8.0 / rms).abs() < 1e-12);
    }

    #[test]
    fn glu_matches_elementwise_definition() {
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let wv = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let wg = Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let out = glu(&x, &wv, &wg).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((out.data()[0] - 1.0 * s(0.5)).abs() < 1e-12);
        assert!((out.data()[1] - (-1.0) * s(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn f32_and_f64_agree_on_small_matmul() {
        let a64 = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let b64 = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.25, -2.0]).unwrap();
        let c64 = matmul(&a64, &b64).unwrap();
        let a32 = Tensor::<f32>::new(
            vec![2, 3],
            a64.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let b32 = Tensor::<f32>::new(
            vec![3, 2],
            b64.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let c32 = matmul(&a32, &b32).unwrap();
        for (x, y) in c64.data().iter().zip(c32.data()) {
            assert!((x - *y as f64).abs() < 1e-6);
        }
    }
}
