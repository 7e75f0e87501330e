//! Caller-owned gradient accumulators.
//!
//! A [`ParamGrads`] mirrors a network's parameter list (same order, same
//! shapes) and is what backward passes accumulate into. Keeping gradients
//! outside the network lets several workers backpropagate through one shared
//! read-only network into their own buffers, which are then summed in a
//! fixed order so results never depend on thread scheduling.

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamGrads<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    /// Zeroed gradients matching `params` (as returned by a network's
    /// parameter accessor).
    pub fn zeros_like(params: &[&Tensor<T>]) -> Self {
        ParamGrads { tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        self.add_scaled(other, T::ONE);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &ParamGrads<T>, s: T) {
        assert_eq!(self.tensors.len(), other.tensors.len(), "grad layout mismatch");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(a.shape(), b.shape(), "grad shape mismatch");
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * *y;
            }
        }
    }

    /// `self *= s`.
    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Largest absolute entry; handy for sanity checks and tests.
    pub fn max_abs(&self) -> T {
        let mut m = T::ZERO;
        for t in &self.tensors {
            for v in t.data() {
                m = m.maximum(v.abs());
            }
        }
        m
    }

    /// Copies these values into the parameters' gradient buffers so an
    /// optimizer step can consume them.
    pub fn load_into(&self, params: &mut [&mut Tensor<T>]) {
        assert_eq!(self.tensors.len(), params.len(), "grad layout mismatch");
        for (g, p) in self.tensors.iter().zip(params.iter_mut()) {
            p.set_grad_from(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_load() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::<f64>::from_vec(&[1], vec![3.0]);
        let mut g = ParamGrads::zeros_like(&[&a, &b]);
        g.tensors[0].data_mut()[0] = 1.0;
        g.tensors[1].data_mut()[0] = 2.0;

        let mut h = g.clone();
        h.add_scaled(&g, 2.0);
        assert_eq!(h.tensors[0].data()[0], 3.0);
        assert_eq!(h.tensors[1].data()[0], 6.0);
        h.scale(0.5);
        assert_eq!(h.tensors[1].data()[0], 3.0);
        assert_eq!(h.max_abs(), 3.0);

        let mut pa = a.clone();
        let mut pb = b.clone();
        h.load_into(&mut [&mut pa, &mut pb]);
        assert_eq!(pa.grad().unwrap(), &[1.5, 0.0]);
        assert_eq!(pb.grad().unwrap(), &[3.0]);

        h.zero();
        assert_eq!(h.max_abs(), 0.0);
    }
}
