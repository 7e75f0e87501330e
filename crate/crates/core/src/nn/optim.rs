//! First-order optimizers over flat parameter lists.
//!
//! An optimizer is constructed once per network and fed the same parameter
//! list (same order, same shapes) on every step; per-parameter state is
//! allocated on the first step and shape-checked afterwards. Gradients are
//! read from each tensor's gradient buffer, and a step that sees any
//! non-finite gradient is rejected wholesale — no parameter moves.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone)]
enum State<T: Scalar> {
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>> },
    Adagrad { accum: Vec<Vec<T>> },
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    steps: u64,
    state: State<T>,
}

impl<T: Scalar> Optimizer<T> {
    /// Adam with the conventional defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn adam(lr: f64) -> Self {
        Optimizer {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            steps: 0,
            state: State::Adam { m: Vec::new(), v: Vec::new() },
        }
    }

    /// Adagrad with ε = 1e-8.
    pub fn adagrad(lr: f64) -> Self {
        Optimizer {
            lr: T::from_f64(lr),
            beta1: T::ZERO,
            beta2: T::ZERO,
            eps: T::from_f64(1e-8),
            steps: 0,
            state: State::Adagrad { accum: Vec::new() },
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step using each parameter's gradient buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), NnError> {
        // Validate every gradient before touching any parameter, so a bad
        // step leaves the network exactly as it was.
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or(NnError::MissingGrad { param: i })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGrad { param: i });
            }
        }
        self.ensure_state(params)?;
        self.steps += 1;
        match &mut self.state {
            State::Adam { m, v } => {
                let t = self.steps as i32;
                let bc1 = T::ONE - powi(self.beta1, t);
                let bc2 = T::ONE - powi(self.beta2, t);
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut m[i], &mut v[i]);
                    // Split borrows: gradient is read-only while data mutates.
                    let grad = p.grad().expect("validated above").to_vec();
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = self.beta1 * m[j] + (T::ONE - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (T::ONE - self.beta2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
            State::Adagrad { accum } => {
                for (i, p) in params.iter_mut().enumerate() {
                    let acc = &mut accum[i];
                    let grad = p.grad().expect("validated above").to_vec();
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        acc[j] += g * g;
                        *x -= self.lr * g / (acc[j].sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_state(&mut self, params: &[&mut Tensor<T>]) -> Result<(), NnError> {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        let check = |bufs: &Vec<Vec<T>>| -> Result<(), NnError> {
            if bufs.len() != sizes.len() || bufs.iter().zip(&sizes).any(|(b, &s)| b.len() != s) {
                return Err(NnError::ShapeMismatch {
                    op: "optimizer",
                    expected: format!("{} params as first step", bufs.len()),
                    found: format!("{} params", sizes.len()),
                });
            }
            Ok(())
        };
        match &mut self.state {
            State::Adam { m, v } => {
                if m.is_empty() {
                    *m = sizes.iter().map(|&s| vec![T::ZERO; s]).collect();
                    *v = sizes.iter().map(|&s| vec![T::ZERO; s]).collect();
                } else {
                    check(m)?;
                }
            }
            State::Adagrad { accum } => {
                if accum.is_empty() {
                    *accum = sizes.iter().map(|&s| vec![T::ZERO; s]).collect();
                } else {
                    check(accum)?;
                }
            }
        }
        Ok(())
    }
}

fn powi<T: Scalar>(base: T, n: i32) -> T {
    let mut r = T::ONE;
    for _ in 0..n {
        r *= base;
    }
    r
}
