//! Template-selection policy: a small convolutional network reads one
//! template's 31×31 matching response and emits a scalar score in (0, 1);
//! across the current pool the scores normalize into a categorical
//! distribution π(a | s) = σ_a / Σ_j σ_j, which is either sampled (during
//! policy training) or taken greedily (during tracking).

use crate::matching::{PredictionMap, MAP_CELLS, MAP_SIDE};
use crate::nn::grads::ParamGrads;
use crate::nn::layers::{
    relu, relu_backward, sigmoid, sigmoid_backward, Conv2d, Dense, Dropout, LayerSpec, MaxPool2,
    Padding,
};
use crate::nn::scalar::Scalar;
use crate::nn::store::{load_tensors, save_tensors, take_tensor, StoreError};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

/// Scores are nudged off the exact {0, 1} endpoints so log-probabilities
/// and the 1/σ_a factor in the gradient stay finite.
const SCORE_EPS: f64 = 1e-6;

const FLAT_FEATURES: usize = 32;
const HIDDEN: usize = 128;
const DROPOUT_KEEP: f64 = 0.7;
const INIT_STD: f64 = 0.1;

#[derive(Debug)]
pub enum PolicyError {
    /// Scoring was asked to run on an empty template list.
    EmptyMaps,
    /// A map tensor does not hold 31×31 values, or a raw score is invalid.
    BadScores { detail: String },
    /// An action index does not address any scored template.
    ActionOutOfRange { action: usize, count: usize },
    Net(NnError),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::EmptyMaps => write!(f, "no prediction maps to score"),
            PolicyError::BadScores { detail } => write!(f, "bad scores: {detail}"),
            PolicyError::ActionOutOfRange { action, count } => {
                write!(f, "action {action} out of range for {count} scored templates")
            }
            PolicyError::Net(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PolicyError {}

impl From<NnError> for PolicyError {
    fn from(e: NnError) -> Self {
        PolicyError::Net(e)
    }
}

/// Raw per-template scores and their normalization into a distribution.
#[derive(Debug, Clone)]
pub struct PolicyScores {
    pub raw: Vec<f32>,
    pub normalized: Vec<f32>,
}

impl PolicyScores {
    /// Normalizes raw scores into a categorical distribution. Raw scores
    /// must be finite and strictly positive (the network's sigmoid outputs
    /// always are).
    pub fn from_raw(raw: Vec<f32>) -> Result<Self, PolicyError> {
        if raw.is_empty() {
            return Err(PolicyError::EmptyMaps);
        }
        if let Some(&v) = raw.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(PolicyError::BadScores { detail: format!("raw score {v} must be a positive finite value") });
        }
        let sum: f32 = raw.iter().sum();
        let normalized = raw.iter().map(|v| v / sum).collect();
        Ok(PolicyScores { raw, normalized })
    }
}

/// Draws an index with probability `normalized[i]` via the cumulative sum;
/// floating-point shortfall at the top end falls back to the last index.
pub fn sample_action<R: Rng>(scores: &PolicyScores, rng: &mut R) -> usize {
    let u: f32 = rng.random_range(0.0..1.0);
    let mut cum = 0.0f32;
    for (i, &p) in scores.normalized.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    scores.normalized.len() - 1
}

/// Argmax of the normalized scores (equivalently of the raw scores, since
/// the normalization is a positive rescaling); ties go to the lowest index.
pub fn greedy_action(scores: &PolicyScores) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.raw.iter().enumerate() {
        if v > scores.raw[best] {
            best = i;
        }
    }
    best
}

/// Canonical parameter order for persistence and gradient buffers.
pub const POLICY_PARAM_NAMES: [&str; 8] = [
    "policy.conv1.kernel",
    "policy.conv1.bias",
    "policy.conv2.kernel",
    "policy.conv2.bias",
    "policy.fc1.weights",
    "policy.fc1.bias",
    "policy.fc2.weights",
    "policy.fc2.bias",
];

const P_CONV1_K: usize = 0;
const P_CONV2_K: usize = 2;
const P_FC1_W: usize = 4;
const P_FC2_W: usize = 6;

fn pair_mut<T: Scalar>(grads: &mut [Tensor<T>], k: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
    let (head, tail) = grads.split_at_mut(k + 1);
    (&mut head[k], &mut tail[0])
}

/// The score stack, written declaratively for shape checking.
pub fn policy_stream_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { kernel: (5, 5), stride: 3, out_channels: 4, padding: Padding::Valid },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv { kernel: (3, 3), stride: 1, out_channels: 8, padding: Padding::Valid },
        LayerSpec::Relu,
    ]
}

/// Forward bookkeeping for one scored map, retained for backward.
#[derive(Debug, Clone)]
struct PolicyTrace<T: Scalar> {
    input: Tensor<T>,
    /// Relu'd conv1 features (pooling input).
    a1: Tensor<T>,
    p1_idx: Vec<u32>,
    p1: Tensor<T>,
    /// Relu'd conv2 features.
    a2: Tensor<T>,
    a_h1: Tensor<T>,
    mask: Option<Vec<T>>,
    d1: Tensor<T>,
    /// Clamped sigmoid output, shape [1].
    score: Tensor<T>,
}

/// Raw scores plus everything needed to backpropagate through them.
#[derive(Debug, Clone)]
pub struct PolicyForward<T: Scalar = f32> {
    pub raw: Vec<T>,
    traces: Vec<PolicyTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct PolicyNet<T: Scalar = f32> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    fc1: Dense<T>,
    fc2: Dense<T>,
    dropout: Dropout,
}

impl<T: Scalar> PolicyNet<T> {
    /// Fresh network with Gaussian(0, 0.1) weights and zero biases, drawn
    /// in canonical parameter order.
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut conv1 = Conv2d::new(5, 5, 1, 4, 3, Padding::Valid).expect("static dims");
        let mut conv2 = Conv2d::new(3, 3, 4, 8, 1, Padding::Valid).expect("static dims");
        let mut fc1 = Dense::new(FLAT_FEATURES, HIDDEN).expect("static dims");
        let mut fc2 = Dense::new(HIDDEN, 1).expect("static dims");
        conv1.init_gaussian(INIT_STD, rng);
        conv2.init_gaussian(INIT_STD, rng);
        fc1.init_gaussian(INIT_STD, rng);
        fc2.init_gaussian(INIT_STD, rng);
        let dropout = Dropout::new(DROPOUT_KEEP).expect("static keep probability");
        PolicyNet { conv1, conv2, fc1, fc2, dropout }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn forward_one<R: Rng>(
        &self,
        map: &Tensor<T>,
        rng: &mut Option<&mut R>,
    ) -> Result<PolicyTrace<T>, PolicyError> {
        if map.numel() != MAP_CELLS {
            return Err(PolicyError::BadScores {
                detail: format!("policy input needs {MAP_CELLS} map values, got shape {:?}", map.shape()),
            });
        }
        let input = map.clone().reshaped(&[MAP_SIDE, MAP_SIDE, 1]);
        let a1 = relu(&self.conv1.forward(&input)?);
        let (p1, p1_idx) = MaxPool2::forward(&a1)?;
        let a2 = relu(&self.conv2.forward(&p1)?);
        let flat = a2.clone().reshaped(&[FLAT_FEATURES]);
        let a_h1 = relu(&self.fc1.forward(&flat)?);
        let (d1, mask) = match rng {
            Some(r) => {
                let (d, m) = self.dropout.forward_train(&a_h1, &mut **r);
                (d, Some(m))
            }
            None => (a_h1.clone(), None),
        };
        let mut score = sigmoid(&self.fc2.forward(&d1)?);
        let lo = T::from_f64(SCORE_EPS);
        let hi = T::ONE - lo;
        for v in score.data_mut() {
            *v = (*v).maximum(lo).minimum(hi);
        }
        Ok(PolicyTrace { input, a1, p1_idx, p1, a2, a_h1, mask, d1, score })
    }

    fn forward_all_impl<R: Rng>(
        &self,
        maps: &[Tensor<T>],
        mut rng: Option<&mut R>,
    ) -> Result<PolicyForward<T>, PolicyError> {
        if maps.is_empty() {
            return Err(PolicyError::EmptyMaps);
        }
        let mut traces = Vec::with_capacity(maps.len());
        for map in maps {
            traces.push(self.forward_one(map, &mut rng)?);
        }
        let raw = traces.iter().map(|t| t.score.data()[0]).collect();
        Ok(PolicyForward { raw, traces })
    }

    /// Inference scoring: dropout off, fully deterministic.
    pub fn forward_all(&self, maps: &[Tensor<T>]) -> Result<PolicyForward<T>, PolicyError> {
        self.forward_all_impl::<ChaCha8Rng>(maps, None)
    }

    /// Training scoring: dropout applied to the hidden activation of every
    /// branch, masks recorded so gradients differentiate exactly the
    /// sampled networks.
    pub fn forward_all_train<R: Rng>(
        &self,
        maps: &[Tensor<T>],
        rng: &mut R,
    ) -> Result<PolicyForward<T>, PolicyError> {
        self.forward_all_impl(maps, Some(rng))
    }

    /// Backpropagates `coeff · d score_j / dθ` for one branch.
    fn backward_one(&self, trace: &PolicyTrace<T>, coeff: T, grads: &mut ParamGrads<T>) {
        let grad_score = Tensor::from_vec(&[1], vec![coeff]);
        let d_z = sigmoid_backward(&trace.score, &grad_score);
        let (wg, bg) = pair_mut(&mut grads.tensors, P_FC2_W);
        let d_d1 = self.fc2.backward(&trace.d1, &d_z, wg, bg);
        let d_a_h1 = match &trace.mask {
            Some(m) => Dropout::backward(&d_d1, m),
            None => d_d1,
        };
        let d_h1 = relu_backward(&trace.a_h1, &d_a_h1);
        let (wg, bg) = pair_mut(&mut grads.tensors, P_FC1_W);
        let flat = trace.a2.clone().reshaped(&[FLAT_FEATURES]);
        let d_flat = self.fc1.backward(&flat, &d_h1, wg, bg);
        let d_a2 = d_flat.reshaped(trace.a2.shape());
        let d_c2 = relu_backward(&trace.a2, &d_a2);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_CONV2_K);
        let d_p1 = self.conv2.backward(&trace.p1, &d_c2, kg, bg);
        let d_a1 = MaxPool2::backward(&d_p1, &trace.p1_idx, trace.a1.shape());
        let d_c1 = relu_backward(&trace.a1, &d_a1);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_CONV1_K);
        let _unused_input_grad = self.conv1.backward(&trace.input, &d_c1, kg, bg);
    }

    /// Accumulates ∇_θ log π(action | maps) into `grads`, where
    /// log π(a) = log σ_a − log Σ_j σ_j; every branch contributes because
    /// the normalizing sum depends on all scores. For a single-template
    /// pool the two terms cancel exactly and nothing is accumulated.
    pub fn log_policy_gradient(
        &self,
        fwd: &PolicyForward<T>,
        action: usize,
        grads: &mut ParamGrads<T>,
    ) -> Result<(), PolicyError> {
        if action >= fwd.raw.len() {
            return Err(PolicyError::ActionOutOfRange { action, count: fwd.raw.len() });
        }
        assert_eq!(grads.tensors.len(), POLICY_PARAM_NAMES.len(), "policy gradient layout");
        if fwd.raw.len() == 1 {
            return Ok(());
        }
        let mut sum = T::ZERO;
        for &r in &fwd.raw {
            sum = sum + r;
        }
        let inv_sum = T::ONE / sum;
        let inv_chosen = T::ONE / fwd.raw[action];
        for (j, trace) in fwd.traces.iter().enumerate() {
            let coeff = if j == action { inv_chosen - inv_sum } else { T::ZERO - inv_sum };
            self.backward_one(trace, coeff, grads);
        }
        Ok(())
    }
}

impl PolicyNet<f32> {
    /// Scores every template's response map in inference mode.
    pub fn score_templates(&self, maps: &[PredictionMap]) -> Result<PolicyScores, PolicyError> {
        let tensors: Vec<Tensor<f32>> = maps.iter().map(|m| m.values().clone()).collect();
        let fwd = self.forward_all(&tensors)?;
        PolicyScores::from_raw(fwd.raw)
    }

    /// Named weight entries in canonical order, for persistence.
    pub fn weight_entries(&self) -> Vec<(&'static str, &Tensor<f32>)> {
        POLICY_PARAM_NAMES.iter().copied().zip(self.params()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        save_tensors(path, &self.weight_entries())
    }

    /// Rebuilds a network from loaded entries, consuming the ones it owns.
    pub fn from_entries(entries: &mut Vec<(String, Tensor<f32>)>) -> Result<Self, StoreError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::<f32>::new(&mut rng);
        net.conv1.kernel = take_tensor(entries, "policy.conv1.kernel", &[5, 5, 1, 4])?;
        net.conv1.bias = take_tensor(entries, "policy.conv1.bias", &[4])?;
        net.conv2.kernel = take_tensor(entries, "policy.conv2.kernel", &[3, 3, 4, 8])?;
        net.conv2.bias = take_tensor(entries, "policy.conv2.bias", &[8])?;
        net.fc1.weights = take_tensor(entries, "policy.fc1.weights", &[FLAT_FEATURES, HIDDEN])?;
        net.fc1.bias = take_tensor(entries, "policy.fc1.bias", &[HIDDEN])?;
        net.fc2.weights = take_tensor(entries, "policy.fc2.weights", &[HIDDEN, 1])?;
        net.fc2.bias = take_tensor(entries, "policy.fc2.bias", &[1])?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let mut entries = load_tensors(path)?;
        Self::from_entries(&mut entries)
    }
}

// ---------------------------------------------------------------------------
// Numerical verification
// ---------------------------------------------------------------------------

/// Every non-smooth decision across all branches of one forward pass.
fn activation_signature<T: Scalar>(fwd: &PolicyForward<T>) -> (Vec<u32>, Vec<bool>) {
    let mut routing = Vec::new();
    let mut signs = Vec::new();
    let lo = T::from_f64(SCORE_EPS);
    let hi = T::ONE - lo;
    for tr in &fwd.traces {
        routing.extend_from_slice(&tr.p1_idx);
        for t in [&tr.a1, &tr.a2, &tr.a_h1] {
            signs.extend(t.data().iter().map(|v| *v > T::ZERO));
        }
        signs.push(tr.score.data()[0] <= lo);
        signs.push(tr.score.data()[0] >= hi);
    }
    (routing, signs)
}

/// Central-difference check of ∇ log π(action) for a two-template pool at
/// f64, inference mode, probing a few parameters in every tensor. Probes
/// whose ±ε interval crosses a relu kink or pooling tie are skipped and
/// replaced (see the layer-check module docs).
///
/// Bias probes shift a whole channel by the full ε, so the hidden weights
/// are scaled up to enlarge every kink margin relative to the perturbation;
/// fc2 — the one layer no relu or pooling follows — is scaled down to keep
/// the sigmoid head in its smooth range.
pub fn gradient_check(seed: u64, probes_per_tensor: usize, eps: f64) -> crate::nn::GradCheckReport {
    use crate::nn::gradcheck::rel_err;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PolicyNet::<f64>::new(&mut rng);
    for w in net.conv1.kernel.data_mut() {
        *w *= 5.0;
    }
    for w in net.conv2.kernel.data_mut() {
        *w *= 5.0;
    }
    for w in net.fc1.weights.data_mut() {
        *w *= 5.0;
    }
    for w in net.fc2.weights.data_mut() {
        *w /= 32.0;
    }
    let maps: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let data = (0..MAP_CELLS).map(|_| rng.random_range(0.05..0.95)).collect();
            Tensor::from_vec(&[MAP_SIDE, MAP_SIDE], data)
        })
        .collect();
    let action = 0usize;

    let log_pi = |fwd: &PolicyForward<f64>| -> f64 {
        fwd.raw[action].ln() - (fwd.raw[0] + fwd.raw[1]).ln()
    };

    let base = net.forward_all(&maps).expect("two maps");
    let smooth = base.raw.iter().all(|&v| v > 1e-3 && v < 1.0 - 1e-3);
    assert!(smooth, "gradient check requires unsaturated scores, got {:?}", base.raw);
    let base_sig = activation_signature(&base);
    let mut grads = ParamGrads::zeros_like(&net.params());
    net.log_policy_gradient(&base, action, &mut grads).expect("action in range");

    let mut report = crate::nn::GradCheckReport::default();
    for ti in 0..POLICY_PARAM_NAMES.len() {
        let numel = net.params()[ti].numel();
        let candidates: Vec<usize> = if numel <= probes_per_tensor {
            (0..numel).collect()
        } else {
            (0..probes_per_tensor * 12).map(|_| rng.random_range(0..numel)).collect()
        };
        let mut accepted = 0usize;
        for ei in candidates {
            if accepted >= probes_per_tensor {
                break;
            }
            let orig = net.params()[ti].data()[ei];
            net.params_mut()[ti].data_mut()[ei] = orig + eps;
            let fwd_p = net.forward_all(&maps).expect("two maps");
            net.params_mut()[ti].data_mut()[ei] = orig - eps;
            let fwd_m = net.forward_all(&maps).expect("two maps");
            net.params_mut()[ti].data_mut()[ei] = orig;
            if activation_signature(&fwd_p) != base_sig || activation_signature(&fwd_m) != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (log_pi(&fwd_p) - log_pi(&fwd_m)) / (2.0 * eps);
            let analytic = grads.tensors[ti].data()[ei];
            report.probes += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
            accepted += 1;
        }
        assert!(accepted > 0, "no valid finite-difference probe for {}", POLICY_PARAM_NAMES[ti]);
    }
    report
}
