//! The layer set both networks are wired from: 2-D convolution (same/valid
//! padding), 2×2 max-pooling, dense, relu, sigmoid, inverted dropout, and
//! flatten/concat plumbing.
//!
//! Layers hold parameters but no activations. `forward` is `&self`, so a
//! fixed-weight network can serve several threads at once; `backward` takes
//! whatever forward context it needs (inputs, pooling indices, dropout
//! masks) as explicit arguments and accumulates parameter gradients into
//! caller-owned tensors.

use super::scalar::{axpy, dot, Scalar};
use super::tensor::Tensor;
use super::NnError;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size is `ceil(input / stride)`; the input is
    /// zero-padded symmetrically (extra pixel on the bottom/right when the
    /// total padding is odd).
    Same,
    /// No padding; output size is `floor((input - kernel) / stride) + 1`.
    Valid,
}

/// Output length and leading pad for one spatial axis, or `None` when the
/// input is too small for the kernel.
pub(crate) fn conv_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let span = (out - 1) * stride + kernel;
            Some((out, span.saturating_sub(input) / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

fn shape_err(op: &'static str, expected: impl Into<String>, found: &[usize]) -> NnError {
    NnError::ShapeMismatch { op, expected: expected.into(), found: format!("{found:?}") }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution over `[h, w, c]` tensors with an `[kh, kw, c, f]` kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    stride: usize,
    padding: Padding,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Result<Self, NnError> {
        if kh == 0 || kw == 0 || c_in == 0 || c_out == 0 || stride == 0 {
            return Err(NnError::BadConfig {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw}x{c_in}x{c_out} stride {stride}: all dims and stride must be >= 1"),
            });
        }
        Ok(Conv2d {
            kernel: Tensor::zeros(&[kh, kw, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// Gaussian weights, zero biases.
    pub fn init_gaussian<R: Rng>(&mut self, std_dev: f64, rng: &mut R) {
        self.kernel = Tensor::gaussian(self.kernel.shape(), std_dev, rng);
        self.bias = Tensor::zeros(self.bias.shape());
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let k = self.kernel.shape();
        (k[0], k[1], k[2], k[3])
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (h, w, c) = match *input.shape() {
            [h, w, c] => (h, w, c),
            _ => return Err(shape_err("conv2d", "[h, w, c]", input.shape())),
        };
        let (kh, kw, c_in, c_out) = self.dims();
        if c != c_in {
            return Err(shape_err("conv2d", format!("input channels {c_in}"), input.shape()));
        }
        let Some((oh, pad_y)) = conv_axis(h, kh, self.stride, self.padding) else {
            return Err(shape_err("conv2d", format!("height >= {kh}"), input.shape()));
        };
        let Some((ow, pad_x)) = conv_axis(w, kw, self.stride, self.padding) else {
            return Err(shape_err("conv2d", format!("width >= {kw}"), input.shape()));
        };

        let x = input.data();
        let k = self.kernel.data();
        let b = self.bias.data();
        let mut out = vec![T::ZERO; oh * ow * c_out];

        for oy in 0..oh {
            let iy0 = (oy * self.stride) as isize - pad_y as isize;
            for ox in 0..ow {
                let ix0 = (ox * self.stride) as isize - pad_x as isize;
                let acc = &mut out[(oy * ow + ox) * c_out..][..c_out];
                acc.copy_from_slice(b);
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &x[(iy as usize * w + ix as usize) * c..][..c];
                        let krow = &k[(ky * kw + kx) * c * c_out..][..c * c_out];
                        for (ci, &xv) in px.iter().enumerate() {
                            if xv != T::ZERO {
                                axpy(xv, &krow[ci * c_out..][..c_out], acc);
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[oh, ow, c_out], out);
        debug_assert!(out.all_finite(), "conv2d produced non-finite values");
        Ok(out)
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    /// `input` must be the tensor the matching forward pass saw.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        kernel_grad: &mut Tensor<T>,
        bias_grad: &mut Tensor<T>,
    ) -> Tensor<T> {
        let [h, w, c] = *input.shape() else { panic!("conv2d backward: input rank") };
        let (kh, kw, c_in, c_out) = self.dims();
        assert_eq!(c, c_in, "conv2d backward: channel mismatch");
        assert_eq!(kernel_grad.shape(), self.kernel.shape(), "conv2d backward: kernel grad shape");
        assert_eq!(bias_grad.shape(), self.bias.shape(), "conv2d backward: bias grad shape");
        let (oh, pad_y) = conv_axis(h, kh, self.stride, self.padding).expect("shape checked in forward");
        let (ow, pad_x) = conv_axis(w, kw, self.stride, self.padding).expect("shape checked in forward");
        assert_eq!(grad_out.shape(), &[oh, ow, c_out], "conv2d backward: grad shape");

        let x = input.data();
        let k = self.kernel.data();
        let go_all = grad_out.data();
        let kg = kernel_grad.data_mut();
        let bg = bias_grad.data_mut();
        let mut dx = vec![T::ZERO; h * w * c];

        for oy in 0..oh {
            let iy0 = (oy * self.stride) as isize - pad_y as isize;
            for ox in 0..ow {
                let ix0 = (ox * self.stride) as isize - pad_x as isize;
                let go = &go_all[(oy * ow + ox) * c_out..][..c_out];
                for (bgf, &g) in bg.iter_mut().zip(go) {
                    *bgf += g;
                }
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * c;
                        let kbase = (ky * kw + kx) * c * c_out;
                        let krow = &k[kbase..][..c * c_out];
                        let kgrow = &mut kg[kbase..][..c * c_out];
                        for ci in 0..c {
                            let xv = x[base + ci];
                            if xv != T::ZERO {
                                axpy(xv, go, &mut kgrow[ci * c_out..][..c_out]);
                            }
                            dx[base + ci] += dot(&krow[ci * c_out..][..c_out], go);
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[h, w, c], dx)
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// 2×2 max-pool with stride 2 and floor semantics: a trailing odd row or
/// column is dropped. Forward also reports, per output element, the flat
/// index of the winning input element so backward can route gradients.
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), NnError> {
        let (h, w, c) = match *input.shape() {
            [h, w, c] => (h, w, c),
            _ => return Err(shape_err("maxpool2", "[h, w, c]", input.shape())),
        };
        if h < 2 || w < 2 {
            return Err(shape_err("maxpool2", "h >= 2 and w >= 2", input.shape()));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = vec![T::ZERO; oh * ow * c];
        let mut idx = vec![0u32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let p00 = (2 * oy * w + 2 * ox) * c;
                let p01 = p00 + c;
                let p10 = p00 + w * c;
                let p11 = p10 + c;
                let o = (oy * ow + ox) * c;
                for ci in 0..c {
                    // Strict comparisons: on ties the earliest candidate
                    // (top-left first) keeps the gradient.
                    let mut best = x[p00 + ci];
                    let mut best_i = p00 + ci;
                    for cand in [p01 + ci, p10 + ci, p11 + ci] {
                        if x[cand] > best {
                            best = x[cand];
                            best_i = cand;
                        }
                    }
                    out[o + ci] = best;
                    idx[o + ci] = best_i as u32;
                }
            }
        }
        Ok((Tensor::from_vec(&[oh, ow, c], out), idx))
    }

    pub fn backward<T: Scalar>(grad_out: &Tensor<T>, idx: &[u32], in_shape: &[usize]) -> Tensor<T> {
        assert_eq!(grad_out.numel(), idx.len(), "maxpool2 backward: index count");
        let mut dx = Tensor::zeros(in_shape);
        let d = dx.data_mut();
        for (&i, &g) in idx.iter().zip(grad_out.data()) {
            d[i as usize] += g;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer: `out = x · W + b` with `W: [n_in, n_out]`.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(n_in: usize, n_out: usize) -> Result<Self, NnError> {
        if n_in == 0 || n_out == 0 {
            return Err(NnError::BadConfig { op: "dense", detail: format!("{n_in}x{n_out}: dims must be >= 1") });
        }
        Ok(Dense { weights: Tensor::zeros(&[n_in, n_out]), bias: Tensor::zeros(&[n_out]) })
    }

    pub fn init_gaussian<R: Rng>(&mut self, std_dev: f64, rng: &mut R) {
        self.weights = Tensor::gaussian(self.weights.shape(), std_dev, rng);
        self.bias = Tensor::zeros(self.bias.shape());
    }

    fn dims(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n_in, n_out) = self.dims();
        if input.shape() != [n_in] {
            return Err(shape_err("dense", format!("[{n_in}]"), input.shape()));
        }
        let x = input.data();
        let w = self.weights.data();
        let mut out = self.bias.data().to_vec();
        for (n, &xv) in x.iter().enumerate() {
            // Inputs are usually post-relu/dropout, so skipping exact zeros
            // saves a large fraction of the work.
            if xv != T::ZERO {
                axpy(xv, &w[n * n_out..][..n_out], &mut out);
            }
        }
        let out = Tensor::from_vec(&[n_out], out);
        debug_assert!(out.all_finite(), "dense produced non-finite values");
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        weight_grad: &mut Tensor<T>,
        bias_grad: &mut Tensor<T>,
    ) -> Tensor<T> {
        let (n_in, n_out) = self.dims();
        assert_eq!(input.shape(), [n_in], "dense backward: input shape");
        assert_eq!(grad_out.shape(), [n_out], "dense backward: grad shape");
        assert_eq!(weight_grad.shape(), self.weights.shape(), "dense backward: weight grad shape");
        assert_eq!(bias_grad.shape(), self.bias.shape(), "dense backward: bias grad shape");

        let x = input.data();
        let w = self.weights.data();
        let go = grad_out.data();
        let wg = weight_grad.data_mut();
        for (bgf, &g) in bias_grad.data_mut().iter_mut().zip(go) {
            *bgf += g;
        }
        let mut dx = vec![T::ZERO; n_in];
        for n in 0..n_in {
            dx[n] = dot(&w[n * n_out..][..n_out], go);
            let xv = x[n];
            if xv != T::ZERO {
                axpy(xv, go, &mut wg[n * n_out..][..n_out]);
            }
        }
        Tensor::from_vec(&[n_in], dx)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.maximum(T::ZERO)).collect();
    Tensor::from_vec(input.shape(), data)
}

/// `output` is the relu output; gradient passes where it is strictly positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(output.shape(), grad_out.shape(), "relu backward: shape");
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split by sign so the exponential never overflows.
    if x >= T::ZERO {
        let e = (-x).exp();
        T::ONE / (T::ONE + e)
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_vec(input.shape(), data)
}

/// `output` is the sigmoid output; d/dx = y·(1−y).
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(output.shape(), grad_out.shape(), "sigmoid backward: shape");
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::ONE - y))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: at training time each element survives with probability
/// `keep` and survivors are scaled by `1/keep`, so the expected activation is
/// unchanged and inference is a plain identity (callers simply skip the
/// layer).
#[derive(Debug, Clone)]
pub struct Dropout {
    keep: f64,
}

impl Dropout {
    pub fn new(keep: f64) -> Result<Self, NnError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(NnError::BadConfig { op: "dropout", detail: format!("keep probability {keep} not in (0, 1]") });
        }
        Ok(Dropout { keep })
    }

    pub fn keep(&self) -> f64 {
        self.keep
    }

    /// Returns the masked activations and the mask of per-element scale
    /// factors (`0` or `1/keep`) that backward must reuse.
    pub fn forward_train<T: Scalar, R: Rng>(&self, input: &Tensor<T>, rng: &mut R) -> (Tensor<T>, Vec<T>) {
        let scale = T::from_f64(1.0 / self.keep);
        let mask: Vec<T> = (0..input.numel())
            .map(|_| if rng.random::<f64>() < self.keep { scale } else { T::ZERO })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        (Tensor::from_vec(input.shape(), data), mask)
    }

    pub fn backward<T: Scalar>(grad_out: &Tensor<T>, mask: &[T]) -> Tensor<T> {
        assert_eq!(grad_out.numel(), mask.len(), "dropout backward: mask length");
        let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}

// ---------------------------------------------------------------------------
// Flatten / concat plumbing
// ---------------------------------------------------------------------------

/// Flattens each part and concatenates them into one rank-1 tensor.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let total: usize = parts.iter().map(|p| p.numel()).sum();
    let mut data = Vec::with_capacity(total);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[total], data)
}

/// Splits a concat gradient back into per-part gradients of the given sizes.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, part_lens: &[usize]) -> Vec<Tensor<T>> {
    assert_eq!(grad_out.numel(), part_lens.iter().sum::<usize>(), "concat backward: length mismatch");
    let g = grad_out.data();
    let mut offset = 0;
    part_lens
        .iter()
        .map(|&len| {
            let t = Tensor::from_vec(&[len], g[offset..offset + len].to_vec());
            offset += len;
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Topology description
// ---------------------------------------------------------------------------

/// Declarative layer description used to write a network's topology down
/// once and derive/verify the shapes it implies.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { kernel: (usize, usize), stride: usize, out_channels: usize, padding: Padding },
    MaxPool2,
    Dense { out: usize },
    Relu,
    Sigmoid,
    Dropout { keep: f64 },
    Flatten,
    Reshape(Vec<usize>),
}

impl LayerSpec {
    /// Shape this layer produces from `input`, or an error if the
    /// combination is invalid.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match self {
            LayerSpec::Conv { kernel, stride, out_channels, padding } => {
                if *stride == 0 {
                    return Err(NnError::BadConfig { op: "layer-spec", detail: "conv stride must be >= 1".into() });
                }
                let [h, w, _c] = *input else {
                    return Err(shape_err("layer-spec conv", "[h, w, c]", input));
                };
                let (oh, _) = conv_axis(h, kernel.0, *stride, *padding)
                    .ok_or_else(|| shape_err("layer-spec conv", format!("height >= {}", kernel.0), input))?;
                let (ow, _) = conv_axis(w, kernel.1, *stride, *padding)
                    .ok_or_else(|| shape_err("layer-spec conv", format!("width >= {}", kernel.1), input))?;
                Ok(vec![oh, ow, *out_channels])
            }
            LayerSpec::MaxPool2 => {
                let [h, w, c] = *input else {
                    return Err(shape_err("layer-spec maxpool", "[h, w, c]", input));
                };
                if h < 2 || w < 2 {
                    return Err(shape_err("layer-spec maxpool", "h >= 2 and w >= 2", input));
                }
                Ok(vec![h / 2, w / 2, c])
            }
            LayerSpec::Dense { out } => {
                let [_n] = *input else {
                    return Err(shape_err("layer-spec dense", "[n]", input));
                };
                Ok(vec![*out])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Dropout { keep } => {
                if !(*keep > 0.0 && *keep <= 1.0) {
                    return Err(NnError::BadConfig { op: "layer-spec", detail: format!("dropout keep {keep} not in (0, 1]") });
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape(shape) => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(shape_err("layer-spec reshape", format!("{shape:?} element count"), input));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// Applies `out_shape` along a stack, returning every intermediate shape
/// (input first, final output last).
pub fn trace_shapes(stack: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>, NnError> {
    let mut shapes = vec![input.to_vec()];
    for spec in stack {
        let next = spec.out_shape(shapes.last().expect("non-empty"))?;
        shapes.push(next);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dead-simple reference convolution used as the oracle for the
    /// optimized forward pass.
    fn conv_reference(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        padding: Padding,
    ) -> Tensor<f64> {
        let [h, w, c] = *input.shape() else { panic!() };
        let [kh, kw, _, f] = *kernel.shape() else { panic!() };
        let (oh, pad_y) = conv_axis(h, kh, stride, padding).unwrap();
        let (ow, pad_x) = conv_axis(w, kw, stride, padding).unwrap();
        let mut out = Tensor::zeros(&[oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for fo in 0..f {
                    let mut acc = bias.data()[fo];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad_y as isize;
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += input.data()[(iy as usize * w + ix as usize) * c + ci]
                                    * kernel.data()[((ky * kw + kx) * c + ci) * f + fo];
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * f + fo] = acc;
                }
            }
        }
        out
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::gaussian(shape, 1.0, rng)
    }

    #[test]
    fn conv_axis_arithmetic() {
        // Same padding: ceil(input / stride).
        assert_eq!(conv_axis(120, 7, 3, Padding::Same), Some((40, 2)));
        assert_eq!(conv_axis(48, 7, 3, Padding::Same), Some((16, 2)));
        assert_eq!(conv_axis(20, 3, 1, Padding::Same), Some((20, 1)));
        assert_eq!(conv_axis(10, 3, 1, Padding::Same), Some((10, 1)));
        // Valid: floor((input - kernel) / stride) + 1.
        assert_eq!(conv_axis(31, 5, 3, Padding::Valid), Some((9, 0)));
        assert_eq!(conv_axis(4, 3, 1, Padding::Valid), Some((2, 0)));
        assert_eq!(conv_axis(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn conv_all_ones_valid_sums_window() {
        // 3x3 all-ones kernel over an all-ones 5x5 input: every interior
        // output is exactly the window sum, 9.
        let mut conv: Conv2d<f64> = Conv2d::new(3, 3, 1, 1, 1, Padding::Valid).unwrap();
        conv.kernel = Tensor::from_vec(&[3, 3, 1, 1], vec![1.0; 9]);
        let input = Tensor::from_vec(&[5, 5, 1], vec![1.0; 25]);
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        assert!(out.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, c, kh, kw, f, stride, padding) in &[
            (7, 6, 3, 3, 3, 5, 1, Padding::Same),
            (9, 9, 2, 3, 3, 4, 2, Padding::Same),
            (11, 8, 3, 5, 3, 2, 3, Padding::Same),
            (8, 8, 2, 3, 3, 3, 1, Padding::Valid),
            (13, 11, 1, 5, 5, 4, 3, Padding::Valid),
            (6, 6, 4, 1, 1, 2, 1, Padding::Valid),
        ] {
            let mut conv: Conv2d<f64> = Conv2d::new(kh, kw, c, f, stride, padding).unwrap();
            conv.kernel = rand_tensor(&[kh, kw, c, f], &mut rng);
            conv.bias = rand_tensor(&[f], &mut rng);
            let input = rand_tensor(&[h, w, c], &mut rng);
            let got = conv.forward(&input).unwrap();
            let want = conv_reference(&input, &conv.kernel, &conv.bias, stride, padding);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-9, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let conv: Conv2d<f64> = Conv2d::new(3, 3, 2, 4, 1, Padding::Valid).unwrap();
        // Wrong channel count.
        let err = conv.forward(&Tensor::zeros(&[5, 5, 3])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
        // Input smaller than the kernel under valid padding.
        let err = conv.forward(&Tensor::zeros(&[2, 5, 2])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
        // Stride zero is rejected at construction.
        assert!(Conv2d::<f64>::new(3, 3, 2, 4, 0, Padding::Same).is_err());
    }

    /// Central-difference check of every conv gradient (kernel, bias, input)
    /// on a small random problem.
    #[test]
    fn conv_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for padding in [Padding::Same, Padding::Valid] {
            let mut conv: Conv2d<f64> = Conv2d::new(3, 3, 2, 3, 2, padding).unwrap();
            conv.kernel = rand_tensor(&[3, 3, 2, 3], &mut rng);
            conv.bias = rand_tensor(&[3], &mut rng);
            let input = rand_tensor(&[6, 5, 2], &mut rng);
            // Scalar loss: weighted sum of outputs with fixed weights.
            let out = conv.forward(&input).unwrap();
            let lw = rand_tensor(out.shape(), &mut rng);
            let loss = |o: &Tensor<f64>| dot(o.data(), lw.data());

            let mut kg = Tensor::zeros(conv.kernel.shape());
            let mut bg = Tensor::zeros(conv.bias.shape());
            let dx = conv.backward(&input, &lw, &mut kg, &mut bg);

            let eps = 1e-5;
            let check = |analytic: f64, numeric: f64| {
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-6,
                    "grad mismatch: analytic {analytic}, numeric {numeric}"
                );
            };
            for i in 0..conv.kernel.numel() {
                let orig = conv.kernel.data()[i];
                conv.kernel.data_mut()[i] = orig + eps;
                let lp = loss(&conv.forward(&input).unwrap());
                conv.kernel.data_mut()[i] = orig - eps;
                let lm = loss(&conv.forward(&input).unwrap());
                conv.kernel.data_mut()[i] = orig;
                check(kg.data()[i], (lp - lm) / (2.0 * eps));
            }
            for i in 0..conv.bias.numel() {
                let orig = conv.bias.data()[i];
                conv.bias.data_mut()[i] = orig + eps;
                let lp = loss(&conv.forward(&input).unwrap());
                conv.bias.data_mut()[i] = orig - eps;
                let lm = loss(&conv.forward(&input).unwrap());
                conv.bias.data_mut()[i] = orig;
                check(bg.data()[i], (lp - lm) / (2.0 * eps));
            }
            let mut input = input;
            for i in 0..input.numel() {
                let orig = input.data()[i];
                input.data_mut()[i] = orig + eps;
                let lp = loss(&conv.forward(&input).unwrap());
                input.data_mut()[i] = orig - eps;
                let lm = loss(&conv.forward(&input).unwrap());
                input.data_mut()[i] = orig;
                check(dx.data()[i], (lp - lm) / (2.0 * eps));
            }
        }
    }

    #[test]
    fn maxpool_shapes_and_values() {
        // 9x9 floors to 4x4.
        let input: Tensor<f64> = Tensor::gaussian(&[9, 9, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let (out, _) = MaxPool2::forward(&input).unwrap();
        assert_eq!(out.shape(), &[4, 4, 3]);

        // Known 4x4 single-channel pattern.
        #[rustfmt::skip]
        let x = Tensor::from_vec(&[4, 4, 1], vec![
            1.0, 2.0, 5.0, 1.0,
            3.0, 4.0, 0.0, 2.0,
            9.0, 1.0, 1.0, 1.0,
            0.0, 8.0, 1.0, 7.0,
        ]);
        let (out, idx) = MaxPool2::forward(&x).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 9.0, 7.0]);
        assert_eq!(idx, vec![5, 2, 8, 15]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        #[rustfmt::skip]
        let x = Tensor::from_vec(&[2, 2, 1], vec![
            1.0, 2.0,
            3.0, 0.5,
        ]);
        let (_, idx) = MaxPool2::forward(&x).unwrap();
        let go = Tensor::from_vec(&[1, 1, 1], vec![10.0]);
        let dx = MaxPool2::backward(&go, &idx, x.shape());
        assert_eq!(dx.data(), &[0.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn maxpool_tie_break_picks_first() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![5.0, 5.0, 5.0, 5.0]);
        let (_, idx) = MaxPool2::forward(&x).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn dense_forward_identity_plus_bias() {
        let mut layer: Dense<f64> = Dense::new(2, 2).unwrap();
        layer.weights = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        layer.bias = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let out = layer.forward(&Tensor::from_vec(&[2], vec![1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer: Dense<f64> = Dense::new(7, 4).unwrap();
        layer.init_gaussian(0.5, &mut rng);
        // Random bias too: init_gaussian zeroes it, which would hide bias
        // gradient errors behind an all-zero start.
        layer.bias = rand_tensor(&[4], &mut rng);
        let input = rand_tensor(&[7], &mut rng);
        let lw = rand_tensor(&[4], &mut rng);

        let mut wg = Tensor::zeros(layer.weights.shape());
        let mut bg = Tensor::zeros(layer.bias.shape());
        let dx = layer.backward(&input, &lw, &mut wg, &mut bg);

        let eps = 1e-5;
        let loss = |layer: &Dense<f64>, input: &Tensor<f64>| dot(layer.forward(input).unwrap().data(), lw.data());
        for i in 0..layer.weights.numel() {
            let orig = layer.weights.data()[i];
            layer.weights.data_mut()[i] = orig + eps;
            let lp = loss(&layer, &input);
            layer.weights.data_mut()[i] = orig - eps;
            let lm = loss(&layer, &input);
            layer.weights.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert!((wg.data()[i] - numeric).abs() < 1e-7);
        }
        for i in 0..layer.bias.numel() {
            assert!((bg.data()[i] - lw.data()[i]).abs() < 1e-12);
        }
        let mut input = input;
        for i in 0..input.numel() {
            let orig = input.data()[i];
            input.data_mut()[i] = orig + eps;
            let lp = loss(&layer, &input);
            input.data_mut()[i] = orig - eps;
            let lm = loss(&layer, &input);
            input.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert!((dx.data()[i] - numeric).abs() < 1e-7);
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        // sigmoid(ln 3) = 3/4 exactly.
        let x = Tensor::from_vec(&[1], vec![3.0f64.ln()]);
        assert!((sigmoid(&x).data()[0] - 0.75).abs() < 1e-12);

        // Stable in the far tails.
        let x = Tensor::from_vec(&[2], vec![-500.0f64, 500.0]);
        let y = sigmoid(&x);
        assert!(y.data()[0] >= 0.0 && y.data()[0] < 1e-10);
        assert!(y.data()[1] <= 1.0 && y.data()[1] > 1.0 - 1e-10);
    }

    #[test]
    fn activation_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = rand_tensor(&[40], &mut rng);
        let lw = rand_tensor(&[40], &mut rng);
        let eps = 1e-6;
        for act in [0, 1] {
            let f = |t: &Tensor<f64>| if act == 0 { relu(t) } else { sigmoid(t) };
            let y = f(&x);
            let dx = if act == 0 { relu_backward(&y, &lw) } else { sigmoid_backward(&y, &lw) };
            for i in 0..x.numel() {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + eps;
                let lp = dot(f(&x).data(), lw.data());
                x.data_mut()[i] = orig - eps;
                let lm = dot(f(&x).data(), lw.data());
                x.data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                assert!((dx.data()[i] - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_keeps_expectation_and_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = Dropout::new(0.7).unwrap();
        let x: Tensor<f64> = Tensor::from_vec(&[100_000], vec![1.0; 100_000]);
        let (y, mask) = layer.forward_train(&x, &mut rng);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / x.numel() as f64;
        assert!((frac - 0.7).abs() < 0.01, "kept fraction {frac}");
        for &v in y.data() {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
        // Backward reuses the identical mask.
        let go = Tensor::from_vec(&[100_000], vec![2.0; 100_000]);
        let dx = Dropout::backward(&go, &mask);
        for (d, m) in dx.data().iter().zip(&mask) {
            assert_eq!(*d, 2.0 * *m);
        }
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Dropout::new(1.0).unwrap();
        let x: Tensor<f64> = Tensor::gaussian(&[64], 1.0, &mut rng);
        let (y, _) = layer.forward_train(&x, &mut rng);
        assert_eq!(x.data(), y.data());
        assert!(Dropout::new(0.0).is_err());
        assert!(Dropout::new(1.5).is_err());
    }

    #[test]
    fn concat_roundtrip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[3], vec![5.0, 6.0, 7.0]);
        let joined = concat(&[&a, &b]);
        assert_eq!(joined.shape(), &[7]);
        assert_eq!(joined.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let parts = concat_backward(&joined, &[4, 3]);
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn layer_spec_shape_algebra() {
        let stack = vec![
            LayerSpec::Conv { kernel: (7, 7), stride: 3, out_channels: 16, padding: Padding::Same },
            LayerSpec::MaxPool2,
            LayerSpec::Relu,
            LayerSpec::Conv { kernel: (3, 3), stride: 1, out_channels: 32, padding: Padding::Same },
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 128 },
        ];
        let shapes = trace_shapes(&stack, &[120, 120, 3]).unwrap();
        assert_eq!(shapes[1], vec![40, 40, 16]);
        assert_eq!(shapes[2], vec![20, 20, 16]);
        assert_eq!(shapes[4], vec![20, 20, 32]);
        assert_eq!(shapes[5], vec![10, 10, 32]);
        assert_eq!(shapes[6], vec![3200]);
        assert_eq!(shapes[7], vec![128]);

        assert!(LayerSpec::Dropout { keep: 0.0 }.out_shape(&[4]).is_err());
        assert!(LayerSpec::Reshape(vec![3, 3]).out_shape(&[8]).is_err());
        assert!(LayerSpec::Conv { kernel: (3, 3), stride: 0, out_channels: 1, padding: Padding::Same }
            .out_shape(&[8, 8, 1])
            .is_err());
    }
}
