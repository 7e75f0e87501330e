//! Dense row-major tensor with an optional gradient buffer.
//!
//! Layout is row-major with the channel axis innermost: an `[h, w, c]`
//! tensor stores element `(y, x, ch)` at `(y * w + x) * c + ch`.

use super::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; n], grad: None }
    }

    /// Wraps an existing buffer. The data length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    /// Tensor filled with draws from a zero-mean Gaussian.
    pub fn gaussian<R: Rng>(shape: &[usize], std_dev: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std_dev).expect("std_dev must be finite and positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            self.data.len(),
            shape.iter().product::<usize>(),
            "reshape to {shape:?} changes element count"
        );
        self.shape = shape.to_vec();
        self
    }

    /// Allocates (or re-zeros) the gradient buffer.
    pub fn alloc_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::ZERO),
            None => self.grad = Some(vec![T::ZERO; self.data.len()]),
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// Copies `src.data()` into this tensor's gradient buffer.
    pub fn set_grad_from(&mut self, src: &Tensor<T>) {
        assert_eq!(self.shape, src.shape, "gradient shape mismatch");
        self.alloc_grad();
        self.grad
            .as_mut()
            .expect("just allocated")
            .copy_from_slice(&src.data);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index and value of the largest element (first occurrence wins).
    pub fn argmax(&self) -> (usize, T) {
        assert!(!self.data.is_empty(), "argmax of empty tensor");
        let mut best = (0, self.data[0]);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    /// Converts element type, e.g. to build an `f64` twin for numeric tests.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}
