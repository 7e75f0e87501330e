//! Finite-difference verification of every differentiable building block.
//!
//! Each check compares analytic gradients against central differences
//! `(f(θ+ε) − f(θ−ε)) / 2ε` on f64 instances, through a smooth scalar
//! objective (a fixed weighted sum of outputs, or cross-entropy for the full
//! networks). Central differences are only a valid oracle where the function
//! is differentiable on the whole probe interval, so checks involving relu
//! or max-pooling either construct inputs whose activation margins exceed
//! the largest possible perturbation, or verify per probe that the
//! activation pattern did not change (see the full-network checks in the
//! `matching` and `policy` modules, which report such probes as skipped).

use crate::nn::layers::{
    relu, relu_backward, sigmoid, sigmoid_backward, Conv2d, Dense, Dropout, MaxPool2, Padding,
};
use crate::nn::scalar::dot;
use crate::nn::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one gradient check: how many parameters were probed, how many
/// probes were discarded because the probe interval crossed a relu kink or a
/// pooling tie (making the central difference meaningless there), and the
/// worst relative error among valid probes.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.probes > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.probes += other.probes;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub(crate) fn record(&mut self, analytic: f64, numeric: f64) {
        self.probes += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Fixed, sign-varied projection weights; no entry is zero, so every output
/// element influences the scalar objective.
fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.05 * ((k % 11) as f64 - 5.3)).collect()
}

fn probe_indices(numel: usize, every: usize) -> impl Iterator<Item = usize> {
    (0..numel).step_by(every.max(1))
}

/// Convolution: kernel, bias, and input gradients. The objective is linear
/// in the outputs and the layer itself is linear in each argument, so every
/// probe is smooth.
pub fn check_conv2d(padding: Padding, stride: usize, eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut conv = Conv2d::<f64>::new(3, 3, 2, 3, stride, padding).expect("static conv dims");
    conv.init_gaussian(0.5, &mut rng);
    for b in conv.bias.data_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let input: Tensor<f64> = Tensor::gaussian(&[8, 8, 2], 1.0, &mut rng);

    let out = conv.forward(&input).expect("conv forward");
    let c = ramp(out.numel());
    let grad_out = Tensor::from_vec(out.shape(), c.clone());
    let mut kg = Tensor::zeros(conv.kernel.shape());
    let mut bg = Tensor::zeros(conv.bias.shape());
    let d_input = conv.backward(&input, &grad_out, &mut kg, &mut bg);

    let loss = |conv: &Conv2d<f64>, input: &Tensor<f64>| -> f64 {
        dot(conv.forward(input).expect("conv forward").data(), &c)
    };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(conv.kernel.numel(), 1) {
        let orig = conv.kernel.data()[ei];
        conv.kernel.data_mut()[ei] = orig + eps;
        let lp = loss(&conv, &input);
        conv.kernel.data_mut()[ei] = orig - eps;
        let lm = loss(&conv, &input);
        conv.kernel.data_mut()[ei] = orig;
        report.record(kg.data()[ei], (lp - lm) / (2.0 * eps));
    }
    for ei in probe_indices(conv.bias.numel(), 1) {
        let orig = conv.bias.data()[ei];
        conv.bias.data_mut()[ei] = orig + eps;
        let lp = loss(&conv, &input);
        conv.bias.data_mut()[ei] = orig - eps;
        let lm = loss(&conv, &input);
        conv.bias.data_mut()[ei] = orig;
        report.record(bg.data()[ei], (lp - lm) / (2.0 * eps));
    }
    let mut input = input;
    for ei in probe_indices(input.numel(), 5) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&conv, &input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&conv, &input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Dense layer: weights, bias, and input gradients; linear, so smooth.
pub fn check_dense(eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut dense = Dense::<f64>::new(10, 7).expect("static dense dims");
    dense.init_gaussian(0.5, &mut rng);
    for b in dense.bias.data_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let mut input: Tensor<f64> = Tensor::gaussian(&[10], 1.0, &mut rng);

    let out = dense.forward(&input).expect("dense forward");
    let c = ramp(out.numel());
    let grad_out = Tensor::from_vec(out.shape(), c.clone());
    let mut wg = Tensor::zeros(dense.weights.shape());
    let mut bg = Tensor::zeros(dense.bias.shape());
    let d_input = dense.backward(&input, &grad_out, &mut wg, &mut bg);

    let loss = |dense: &Dense<f64>, input: &Tensor<f64>| -> f64 {
        dot(dense.forward(input).expect("dense forward").data(), &c)
    };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(dense.weights.numel(), 1) {
        let orig = dense.weights.data()[ei];
        dense.weights.data_mut()[ei] = orig + eps;
        let lp = loss(&dense, &input);
        dense.weights.data_mut()[ei] = orig - eps;
        let lm = loss(&dense, &input);
        dense.weights.data_mut()[ei] = orig;
        report.record(wg.data()[ei], (lp - lm) / (2.0 * eps));
    }
    for ei in probe_indices(dense.bias.numel(), 1) {
        let orig = dense.bias.data()[ei];
        dense.bias.data_mut()[ei] = orig + eps;
        let lp = loss(&dense, &input);
        dense.bias.data_mut()[ei] = orig - eps;
        let lm = loss(&dense, &input);
        dense.bias.data_mut()[ei] = orig;
        report.record(bg.data()[ei], (lp - lm) / (2.0 * eps));
    }
    for ei in probe_indices(input.numel(), 1) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&dense, &input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&dense, &input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Max pooling: input gradients through the routing indices. Inputs are
/// checked to have window margins comfortably larger than the perturbation,
/// so no probe can flip a routing decision.
pub fn check_maxpool(eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, w, ch) = (6, 6, 4);
    let mut input: Tensor<f64> = Tensor::gaussian(&[h, w, ch], 1.0, &mut rng);

    // Smallest winner-to-runner-up margin across all pooling windows.
    let mut min_margin = f64::INFINITY;
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            for c in 0..ch {
                let mut vals: Vec<f64> = (0..4)
                    .map(|k| input.data()[((2 * oy + k / 2) * w + 2 * ox + k % 2) * ch + c])
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                min_margin = min_margin.min(vals[0] - vals[1]);
            }
        }
    }
    assert!(min_margin > 4.0 * eps, "pooling margins too tight for a valid probe: {min_margin}");

    let (out, idx) = MaxPool2::forward(&input).expect("pool forward");
    let c = ramp(out.numel());
    let grad_out = Tensor::from_vec(out.shape(), c.clone());
    let d_input = MaxPool2::backward(&grad_out, &idx, input.shape());

    let loss = |input: &Tensor<f64>| -> f64 {
        dot(MaxPool2::forward(input).expect("pool forward").0.data(), &c)
    };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(input.numel(), 1) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Relu: input gradients, on inputs verified to sit away from the kink.
pub fn check_relu(eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut input: Tensor<f64> = Tensor::gaussian(&[40], 1.0, &mut rng);
    for v in input.data_mut() {
        // Push every element at least 0.1 away from zero; the gradient on
        // both sides of the kink is still exercised because signs vary.
        *v += 0.1 * v.signum();
    }

    let out = relu(&input);
    let c = ramp(out.numel());
    let grad_out = Tensor::from_vec(out.shape(), c.clone());
    let d_input = relu_backward(&out, &grad_out);

    let loss = |input: &Tensor<f64>| -> f64 { dot(relu(input).data(), &c) };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(input.numel(), 1) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Sigmoid: input gradients; smooth everywhere.
pub fn check_sigmoid(eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut input: Tensor<f64> = Tensor::gaussian(&[40], 2.0, &mut rng);

    let out = sigmoid(&input);
    let c = ramp(out.numel());
    let grad_out = Tensor::from_vec(out.shape(), c.clone());
    let d_input = sigmoid_backward(&out, &grad_out);

    let loss = |input: &Tensor<f64>| -> f64 { dot(sigmoid(input).data(), &c) };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(input.numel(), 1) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Dropout: for one sampled mask, the layer is the fixed linear map
/// `x ↦ x ⊙ mask`, and backward must apply exactly that mask.
pub fn check_dropout(eps: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let dropout = Dropout::new(0.7).expect("static keep probability");
    let mut input: Tensor<f64> = Tensor::gaussian(&[60], 1.0, &mut rng);
    let (_, mask) = dropout.forward_train(&input, &mut rng);
    let inv_keep = 1.0 / 0.7;
    assert!(mask.iter().all(|&m| m == 0.0 || (m - inv_keep).abs() < 1e-12), "mask entries must be 0 or 1/keep");

    let c = ramp(input.numel());
    let grad_out = Tensor::from_vec(&[input.numel()], c.clone());
    let d_input = Dropout::backward(&grad_out, &mask);

    let loss = |input: &Tensor<f64>| -> f64 {
        input.data().iter().zip(&mask).zip(&c).map(|((&x, &m), &w)| x * m * w).sum()
    };

    let mut report = GradCheckReport::default();
    for ei in probe_indices(input.numel(), 1) {
        let orig = input.data()[ei];
        input.data_mut()[ei] = orig + eps;
        let lp = loss(&input);
        input.data_mut()[ei] = orig - eps;
        let lm = loss(&input);
        input.data_mut()[ei] = orig;
        report.record(d_input.data()[ei], (lp - lm) / (2.0 * eps));
    }
    report
}

/// Runs every layer-kind check and merges the reports.
pub fn check_all_layers(eps: f64) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    report.merge(&check_conv2d(Padding::Same, 3, eps));
    report.merge(&check_conv2d(Padding::Same, 1, eps));
    report.merge(&check_conv2d(Padding::Valid, 3, eps));
    report.merge(&check_conv2d(Padding::Valid, 1, eps));
    report.merge(&check_dense(eps));
    report.merge(&check_maxpool(eps));
    report.merge(&check_relu(eps));
    report.merge(&check_sigmoid(eps));
    report.merge(&check_dropout(eps));
    report
}
