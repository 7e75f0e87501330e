//! The Siamese matching network: a 48×48 template and a 120×120 search
//! window go through a shared convolutional stack, and a fully connected
//! head fuses both streams into a 31×31 prediction map whose peak marks the
//! template's displacement inside the search window.
//!
//! Each map cell spans `side/31` source pixels, so cell `(15, 15)` is "no
//! displacement" and the peak cell converts to a pixel offset via
//! [`cell_to_displacement`].

use crate::img::Image;
use crate::nn::grads::ParamGrads;
use crate::nn::layers::{
    concat, concat_backward, relu, relu_backward, sigmoid, sigmoid_backward, Conv2d, Dense,
    Dropout, LayerSpec, MaxPool2, Padding,
};
use crate::nn::optim::Optimizer;
use crate::nn::scalar::Scalar;
use crate::nn::store::{load_tensors, save_tensors, take_tensor, StoreError};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::path::Path;

pub const TEMPLATE_SIDE: usize = 48;
pub const SEARCH_SIDE: usize = 120;
pub const MAP_SIDE: usize = 31;
pub const MAP_CELLS: usize = MAP_SIDE * MAP_SIDE;
/// Index of the "no displacement" cell on each axis.
pub const MAP_CENTER: i32 = (MAP_SIDE as i32 - 1) / 2;

/// Sigmoid outputs are nudged off the exact {0, 1} endpoints (f32 rounding
/// can reach them for saturated inputs) so map values stay strictly inside
/// the open interval and downstream log terms stay finite.
const MAP_VALUE_EPS: f64 = 1e-6;

/// Probability clamp used by the cross-entropy loss.
const LOSS_EPS: f64 = 1e-7;

#[derive(Debug)]
pub enum MatchingError {
    /// A patch constructor was handed the wrong shape or out-of-range pixels.
    BadPatch { what: &'static str, detail: String },
    /// A Gaussian target's peak cell falls outside the 31×31 map.
    TargetOutsideMap { peak_row: i32, peak_col: i32 },
    /// A label map is malformed (bad range, bad shape, bad sigma).
    BadTarget { detail: String },
    /// Training was asked to run on an empty pair stream.
    EmptyTrainingSet,
    Net(NnError),
}

impl fmt::Display for MatchingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchingError::BadPatch { what, detail } => write!(f, "bad {what}: {detail}"),
            MatchingError::TargetOutsideMap { peak_row, peak_col } => {
                write!(f, "target peak ({peak_row}, {peak_col}) lies outside the {MAP_SIDE}x{MAP_SIDE} map")
            }
            MatchingError::BadTarget { detail } => write!(f, "bad target map: {detail}"),
            MatchingError::EmptyTrainingSet => write!(f, "training pair stream is empty"),
            MatchingError::Net(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MatchingError {}

impl From<NnError> for MatchingError {
    fn from(e: NnError) -> Self {
        MatchingError::Net(e)
    }
}

// ---------------------------------------------------------------------------
// Input / output newtypes
// ---------------------------------------------------------------------------

/// A 48×48×3 appearance exemplar with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePatch {
    pixels: Tensor<f32>,
}

impl TemplatePatch {
    pub fn new(pixels: Tensor<f32>) -> Result<Self, MatchingError> {
        if pixels.shape() != [TEMPLATE_SIDE, TEMPLATE_SIDE, 3] {
            return Err(MatchingError::BadPatch {
                what: "template patch",
                detail: format!("expected shape [{TEMPLATE_SIDE}, {TEMPLATE_SIDE}, 3], got {:?}", pixels.shape()),
            });
        }
        if let Some(&v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MatchingError::BadPatch {
                what: "template patch",
                detail: format!("pixel value {v} outside [0, 1]"),
            });
        }
        Ok(TemplatePatch { pixels })
    }

    pub fn from_image(img: &Image) -> Result<Self, MatchingError> {
        if img.height() != TEMPLATE_SIDE || img.width() != TEMPLATE_SIDE {
            return Err(MatchingError::BadPatch {
                what: "template patch",
                detail: format!("expected a {TEMPLATE_SIDE}x{TEMPLATE_SIDE} image, got {}x{}", img.height(), img.width()),
            });
        }
        Self::new(Tensor::from_vec(&[TEMPLATE_SIDE, TEMPLATE_SIDE, 3], img.data().to_vec()))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }
}

/// A 120×120×3 search window plus the geometry of the source-frame crop it
/// came from, so map cells can be converted back to frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchPatch {
    pixels: Tensor<f32>,
    center: (f32, f32),
    side: f32,
}

impl SearchPatch {
    pub fn new(pixels: Tensor<f32>, center: (f32, f32), side: f32) -> Result<Self, MatchingError> {
        if pixels.shape() != [SEARCH_SIDE, SEARCH_SIDE, 3] {
            return Err(MatchingError::BadPatch {
                what: "search patch",
                detail: format!("expected shape [{SEARCH_SIDE}, {SEARCH_SIDE}, 3], got {:?}", pixels.shape()),
            });
        }
        if !(side > 0.0) || !side.is_finite() {
            return Err(MatchingError::BadPatch { what: "search patch", detail: format!("crop side {side} must be positive") });
        }
        Ok(SearchPatch { pixels, center, side })
    }

    pub fn from_image(img: &Image, center: (f32, f32), side: f32) -> Result<Self, MatchingError> {
        if img.height() != SEARCH_SIDE || img.width() != SEARCH_SIDE {
            return Err(MatchingError::BadPatch {
                what: "search patch",
                detail: format!("expected a {SEARCH_SIDE}x{SEARCH_SIDE} image, got {}x{}", img.height(), img.width()),
            });
        }
        Self::new(Tensor::from_vec(&[SEARCH_SIDE, SEARCH_SIDE, 3], img.data().to_vec()), center, side)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    /// Crop center in source-frame pixels.
    pub fn center(&self) -> (f32, f32) {
        self.center
    }

    /// Crop side length in source-frame pixels.
    pub fn side(&self) -> f32 {
        self.side
    }
}

/// A 31×31 matcher output with every value strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    values: Tensor<f32>,
}

impl PredictionMap {
    /// Validating constructor for externally built maps (tests, synthetic
    /// training states). Accepts `[31, 31]` or flat `[961]`.
    pub fn new(values: Tensor<f32>) -> Result<Self, MatchingError> {
        if values.numel() != MAP_CELLS {
            return Err(MatchingError::BadTarget {
                detail: format!("prediction map needs {MAP_CELLS} values, got shape {:?}", values.shape()),
            });
        }
        if let Some(&v) = values.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(MatchingError::BadTarget { detail: format!("map value {v} outside the open interval (0, 1)") });
        }
        Ok(PredictionMap { values: values.reshaped(&[MAP_SIDE, MAP_SIDE]) })
    }

    /// Trusted path for the network's own (already clamped) output.
    fn from_net_output(values: Tensor<f32>) -> Self {
        debug_assert_eq!(values.numel(), MAP_CELLS);
        PredictionMap { values: values.reshaped(&[MAP_SIDE, MAP_SIDE]) }
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    /// Peak cell as (row, col); first occurrence wins on exact ties.
    pub fn peak(&self) -> (usize, usize) {
        let (idx, _) = self.values.argmax();
        (idx / MAP_SIDE, idx % MAP_SIDE)
    }

    pub fn max_value(&self) -> f32 {
        self.values.argmax().1
    }
}

// ---------------------------------------------------------------------------
// Map-cell geometry
// ---------------------------------------------------------------------------

/// Width of one map cell in source pixels for a crop of the given side.
pub fn cell_size_px(crop_side: f32) -> f32 {
    crop_side / MAP_SIDE as f32
}

/// Converts a map cell to the (dx, dy) pixel displacement it encodes,
/// relative to the crop center.
pub fn cell_to_displacement(cell: (usize, usize), crop_side: f32) -> (f32, f32) {
    let cs = cell_size_px(crop_side);
    ((cell.1 as f32 - MAP_CENTER as f32) * cs, (cell.0 as f32 - MAP_CENTER as f32) * cs)
}

/// Nearest map cell (row, col) for a pixel displacement; the result may fall
/// outside [0, 31) when the displacement exceeds the crop.
pub fn displacement_to_cell(dx: f32, dy: f32, crop_side: f32) -> (i32, i32) {
    let cs = cell_size_px(crop_side);
    ((dy / cs).round() as i32 + MAP_CENTER, (dx / cs).round() as i32 + MAP_CENTER)
}

/// Gaussian label map peaked (at exactly 1.0) `offset_cells` away from the
/// center cell: value(i, j) = exp(−((i−pi)² + (j−pj)²) / (2σ²)).
pub fn gaussian_target_map(offset_cells: (i32, i32), sigma: f64) -> Result<Tensor<f32>, MatchingError> {
    if !(sigma > 0.0) {
        return Err(MatchingError::BadTarget { detail: format!("sigma {sigma} must be positive") });
    }
    let pr = MAP_CENTER + offset_cells.0;
    let pc = MAP_CENTER + offset_cells.1;
    if !(0..MAP_SIDE as i32).contains(&pr) || !(0..MAP_SIDE as i32).contains(&pc) {
        return Err(MatchingError::TargetOutsideMap { peak_row: pr, peak_col: pc });
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(MAP_CELLS);
    for i in 0..MAP_SIDE as i32 {
        for j in 0..MAP_SIDE as i32 {
            let d2 = ((i - pr) * (i - pr) + (j - pc) * (j - pc)) as f64;
            data.push((-d2 * inv).exp() as f32);
        }
    }
    Ok(Tensor::from_vec(&[MAP_SIDE, MAP_SIDE], data))
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

/// Per-stream convolutional stack, written declaratively for shape checking.
pub fn stream_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { kernel: (7, 7), stride: 3, out_channels: 16, padding: Padding::Same },
        LayerSpec::MaxPool2,
        LayerSpec::Relu,
        LayerSpec::Conv { kernel: (3, 3), stride: 1, out_channels: 32, padding: Padding::Same },
        LayerSpec::MaxPool2,
        LayerSpec::Relu,
        LayerSpec::Conv { kernel: (3, 3), stride: 1, out_channels: 64, padding: Padding::Same },
        LayerSpec::MaxPool2,
        LayerSpec::Relu,
    ]
}

/// Forward bookkeeping for one Siamese stream, retained for backward.
#[derive(Debug, Clone)]
struct StreamTrace<T: Scalar> {
    input: Tensor<T>,
    c1_shape: Vec<usize>,
    p1_idx: Vec<u32>,
    /// First pooled + relu'd features; input to both conv2 and the skip conv.
    a1: Tensor<T>,
    /// Relu'd skip-branch features.
    ask: Tensor<T>,
    c2_shape: Vec<usize>,
    p2_idx: Vec<u32>,
    a2: Tensor<T>,
    c3_shape: Vec<usize>,
    p3_idx: Vec<u32>,
    /// Final main-branch features.
    a3: Tensor<T>,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct MatchTrace<T: Scalar = f32> {
    template: StreamTrace<T>,
    search: StreamTrace<T>,
    /// Concatenated features [template main, template skip, search main,
    /// search skip], the fc1 input.
    joint: Tensor<T>,
    a_h1: Tensor<T>,
    mask1: Option<Vec<T>>,
    d1: Tensor<T>,
    a_h2: Tensor<T>,
    mask2: Option<Vec<T>>,
    d2: Tensor<T>,
    /// Clamped sigmoid output, flat [961].
    map: Tensor<T>,
}

/// Canonical parameter order; every weights file and gradient buffer uses it.
pub const PARAM_NAMES: [&str; 14] = [
    "match.conv1.kernel",
    "match.conv1.bias",
    "match.conv2.kernel",
    "match.conv2.bias",
    "match.conv3.kernel",
    "match.conv3.bias",
    "match.skip.kernel",
    "match.skip.bias",
    "match.fc1.weights",
    "match.fc1.bias",
    "match.fc2.weights",
    "match.fc2.bias",
    "match.fc3.weights",
    "match.fc3.bias",
];

const P_CONV1_K: usize = 0;
const P_CONV2_K: usize = 2;
const P_CONV3_K: usize = 4;
const P_SKIP_K: usize = 6;
const P_FC1_W: usize = 8;
const P_FC2_W: usize = 10;
const P_FC3_W: usize = 12;

const JOINT_FEATURES: usize = 3712;
const HIDDEN: usize = 2048;
const DROPOUT_KEEP: f64 = 0.8;
const INIT_STD: f64 = 0.1;

/// Returns (kernel grad, bias grad) mutable views at a kernel index, relying
/// on the bias always directly following its kernel in the canonical order.
fn pair_mut<T: Scalar>(grads: &mut [Tensor<T>], k: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
    let (head, tail) = grads.split_at_mut(k + 1);
    (&mut head[k], &mut tail[0])
}

#[derive(Debug, Clone)]
pub struct MatchingNet<T: Scalar = f32> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
    skip: Conv2d<T>,
    fc1: Dense<T>,
    fc2: Dense<T>,
    fc3: Dense<T>,
    dropout: Dropout,
}

impl<T: Scalar> MatchingNet<T> {
    /// Fresh network with Gaussian(0, 0.1) weights and zero biases, drawn in
    /// canonical parameter order.
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut conv1 = Conv2d::new(7, 7, 3, 16, 3, Padding::Same).expect("static dims");
        let mut conv2 = Conv2d::new(3, 3, 16, 32, 1, Padding::Same).expect("static dims");
        let mut conv3 = Conv2d::new(3, 3, 32, 64, 1, Padding::Same).expect("static dims");
        let mut skip = Conv2d::new(1, 1, 16, 4, 1, Padding::Same).expect("static dims");
        let mut fc1 = Dense::new(JOINT_FEATURES, HIDDEN).expect("static dims");
        let mut fc2 = Dense::new(HIDDEN, HIDDEN).expect("static dims");
        let mut fc3 = Dense::new(HIDDEN, MAP_CELLS).expect("static dims");
        conv1.init_gaussian(INIT_STD, rng);
        conv2.init_gaussian(INIT_STD, rng);
        conv3.init_gaussian(INIT_STD, rng);
        skip.init_gaussian(INIT_STD, rng);
        fc1.init_gaussian(INIT_STD, rng);
        fc2.init_gaussian(INIT_STD, rng);
        fc3.init_gaussian(INIT_STD, rng);
        let dropout = Dropout::new(DROPOUT_KEEP).expect("static keep probability");
        MatchingNet { conv1, conv2, conv3, skip, fc1, fc2, fc3, dropout }
    }

    /// Parameters in canonical order (see [`PARAM_NAMES`]).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.conv3.kernel,
            &self.conv3.bias,
            &self.skip.kernel,
            &self.skip.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
            &self.fc3.weights,
            &self.fc3.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.conv3.kernel,
            &mut self.conv3.bias,
            &mut self.skip.kernel,
            &mut self.skip.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
            &mut self.fc3.weights,
            &mut self.fc3.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn stream_forward(&self, input: &Tensor<T>) -> Result<StreamTrace<T>, NnError> {
        let c1 = self.conv1.forward(input)?;
        let c1_shape = c1.shape().to_vec();
        let (p1, p1_idx) = MaxPool2::forward(&c1)?;
        let a1 = relu(&p1);
        let ask = relu(&self.skip.forward(&a1)?);
        let c2 = self.conv2.forward(&a1)?;
        let c2_shape = c2.shape().to_vec();
        let (p2, p2_idx) = MaxPool2::forward(&c2)?;
        let a2 = relu(&p2);
        let c3 = self.conv3.forward(&a2)?;
        let c3_shape = c3.shape().to_vec();
        let (p3, p3_idx) = MaxPool2::forward(&c3)?;
        let a3 = relu(&p3);
        Ok(StreamTrace { input: input.clone(), c1_shape, p1_idx, a1, ask, c2_shape, p2_idx, a2, c3_shape, p3_idx, a3 })
    }

    fn forward_impl<R: Rng>(
        &self,
        template: &Tensor<T>,
        search: &Tensor<T>,
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor<T>, MatchTrace<T>), NnError> {
        let t = self.stream_forward(template)?;
        let s = self.stream_forward(search)?;
        let joint = concat(&[&t.a3, &t.ask, &s.a3, &s.ask]);

        let dropped = |x: &Tensor<T>, rng: &mut Option<&mut R>| -> (Tensor<T>, Option<Vec<T>>) {
            match rng {
                Some(r) => {
                    let (d, m) = self.dropout.forward_train(x, &mut **r);
                    (d, Some(m))
                }
                None => (x.clone(), None),
            }
        };

        let a_h1 = relu(&self.fc1.forward(&joint)?);
        let (d1, mask1) = dropped(&a_h1, &mut rng);
        let a_h2 = relu(&self.fc2.forward(&d1)?);
        let (d2, mask2) = dropped(&a_h2, &mut rng);
        let mut map = sigmoid(&self.fc3.forward(&d2)?);
        let lo = T::from_f64(MAP_VALUE_EPS);
        let hi = T::ONE - lo;
        for v in map.data_mut() {
            *v = (*v).maximum(lo).minimum(hi);
        }
        let trace =
            MatchTrace { template: t, search: s, joint, a_h1, mask1, d1, a_h2, mask2, d2, map: map.clone() };
        Ok((map, trace))
    }

    /// Inference forward: dropout off, fully deterministic.
    pub fn forward(&self, template: &Tensor<T>, search: &Tensor<T>) -> Result<(Tensor<T>, MatchTrace<T>), NnError> {
        self.forward_impl::<ChaCha8Rng>(template, search, None)
    }

    /// Training forward: dropout applied to both hidden fc activations using
    /// the supplied rng; the masks are recorded in the trace so backward
    /// differentiates exactly the sampled network.
    pub fn forward_train<R: Rng>(
        &self,
        template: &Tensor<T>,
        search: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, MatchTrace<T>), NnError> {
        self.forward_impl(template, search, Some(rng))
    }

    fn stream_backward(
        &self,
        st: &StreamTrace<T>,
        d_main_flat: &Tensor<T>,
        d_skip_flat: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) {
        let d_a3 = d_main_flat.clone().reshaped(st.a3.shape());
        let d_p3 = relu_backward(&st.a3, &d_a3);
        let d_c3 = MaxPool2::backward(&d_p3, &st.p3_idx, &st.c3_shape);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_CONV3_K);
        let d_a2 = self.conv3.backward(&st.a2, &d_c3, kg, bg);

        let d_p2 = relu_backward(&st.a2, &d_a2);
        let d_c2 = MaxPool2::backward(&d_p2, &st.p2_idx, &st.c2_shape);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_CONV2_K);
        let mut d_a1 = self.conv2.backward(&st.a1, &d_c2, kg, bg);

        let d_ask = d_skip_flat.clone().reshaped(st.ask.shape());
        let d_skip = relu_backward(&st.ask, &d_ask);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_SKIP_K);
        let d_a1_skip = self.skip.backward(&st.a1, &d_skip, kg, bg);
        for (a, b) in d_a1.data_mut().iter_mut().zip(d_a1_skip.data()) {
            *a += *b;
        }

        let d_p1 = relu_backward(&st.a1, &d_a1);
        let d_c1 = MaxPool2::backward(&d_p1, &st.p1_idx, &st.c1_shape);
        let (kg, bg) = pair_mut(&mut grads.tensors, P_CONV1_K);
        let _unused_input_grad = self.conv1.backward(&st.input, &d_c1, kg, bg);
    }

    /// Accumulates parameter gradients for `d loss / d map` into `grads`
    /// (canonical order). The conv-stack gradients receive contributions
    /// from both Siamese streams since the weights are shared storage.
    pub fn backward(&self, trace: &MatchTrace<T>, grad_map: &Tensor<T>, grads: &mut ParamGrads<T>) {
        assert_eq!(grad_map.numel(), MAP_CELLS, "matching backward: map gradient size");
        assert_eq!(grads.tensors.len(), PARAM_NAMES.len(), "matching backward: gradient layout");
        let grad_map = grad_map.clone().reshaped(&[MAP_CELLS]);

        let d_h3 = sigmoid_backward(&trace.map, &grad_map);
        let (wg, bg) = pair_mut(&mut grads.tensors, P_FC3_W);
        let d_d2 = self.fc3.backward(&trace.d2, &d_h3, wg, bg);
        let d_a_h2 = match &trace.mask2 {
            Some(m) => Dropout::backward(&d_d2, m),
            None => d_d2,
        };
        let d_h2 = relu_backward(&trace.a_h2, &d_a_h2);
        let (wg, bg) = pair_mut(&mut grads.tensors, P_FC2_W);
        let d_d1 = self.fc2.backward(&trace.d1, &d_h2, wg, bg);
        let d_a_h1 = match &trace.mask1 {
            Some(m) => Dropout::backward(&d_d1, m),
            None => d_d1,
        };
        let d_h1 = relu_backward(&trace.a_h1, &d_a_h1);
        let (wg, bg) = pair_mut(&mut grads.tensors, P_FC1_W);
        let d_joint = self.fc1.backward(&trace.joint, &d_h1, wg, bg);

        let t_main = trace.template.a3.numel();
        let t_skip = trace.template.ask.numel();
        let s_main = trace.search.a3.numel();
        let s_skip = trace.search.ask.numel();
        let parts = concat_backward(&d_joint, &[t_main, t_skip, s_main, s_skip]);
        self.stream_backward(&trace.template, &parts[0], &parts[1], grads);
        self.stream_backward(&trace.search, &parts[2], &parts[3], grads);
    }
}

impl MatchingNet<f32> {
    /// Inference on validated patches; infallible because the newtypes
    /// guarantee the shapes the network was built for.
    pub fn predict(&self, template: &TemplatePatch, search: &SearchPatch) -> PredictionMap {
        let (map, _) = self.forward(template.tensor(), search.tensor()).expect("validated patch shapes");
        PredictionMap::from_net_output(map)
    }

    /// Named weight entries in canonical order, for persistence.
    pub fn weight_entries(&self) -> Vec<(&'static str, &Tensor<f32>)> {
        PARAM_NAMES.iter().copied().zip(self.params()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        save_tensors(path, &self.weight_entries())
    }

    /// Rebuilds a network from loaded entries, consuming the ones it owns;
    /// entries for other networks in the same file are left untouched.
    pub fn from_entries(entries: &mut Vec<(String, Tensor<f32>)>) -> Result<Self, StoreError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = MatchingNet::<f32>::new(&mut rng);
        net.conv1.kernel = take_tensor(entries, "match.conv1.kernel", &[7, 7, 3, 16])?;
        net.conv1.bias = take_tensor(entries, "match.conv1.bias", &[16])?;
        net.conv2.kernel = take_tensor(entries, "match.conv2.kernel", &[3, 3, 16, 32])?;
        net.conv2.bias = take_tensor(entries, "match.conv2.bias", &[32])?;
        net.conv3.kernel = take_tensor(entries, "match.conv3.kernel", &[3, 3, 32, 64])?;
        net.conv3.bias = take_tensor(entries, "match.conv3.bias", &[64])?;
        net.skip.kernel = take_tensor(entries, "match.skip.kernel", &[1, 1, 16, 4])?;
        net.skip.bias = take_tensor(entries, "match.skip.bias", &[4])?;
        net.fc1.weights = take_tensor(entries, "match.fc1.weights", &[JOINT_FEATURES, HIDDEN])?;
        net.fc1.bias = take_tensor(entries, "match.fc1.bias", &[HIDDEN])?;
        net.fc2.weights = take_tensor(entries, "match.fc2.weights", &[HIDDEN, HIDDEN])?;
        net.fc2.bias = take_tensor(entries, "match.fc2.bias", &[HIDDEN])?;
        net.fc3.weights = take_tensor(entries, "match.fc3.weights", &[HIDDEN, MAP_CELLS])?;
        net.fc3.bias = take_tensor(entries, "match.fc3.bias", &[MAP_CELLS])?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let mut entries = load_tensors(path)?;
        Self::from_entries(&mut entries)
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

fn check_target<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), MatchingError> {
    if pred.numel() != target.numel() {
        return Err(MatchingError::BadTarget {
            detail: format!("prediction has {} cells, target has {}", pred.numel(), target.numel()),
        });
    }
    if let Some(&v) = target.data().iter().find(|v| !(T::ZERO..=T::ONE).contains(*v)) {
        return Err(MatchingError::BadTarget { detail: format!("target value {v} outside [0, 1]") });
    }
    Ok(())
}

/// Mean per-cell binary cross-entropy, with predictions clamped away from
/// {0, 1}. Accumulated in f64 regardless of the working precision.
pub fn matching_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, MatchingError> {
    check_target(pred, target)?;
    let mut sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.to_f64().clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        let t = t.to_f64();
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(sum / pred.numel() as f64)
}

/// Gradient of [`matching_loss`] with respect to the prediction. Composed
/// with the sigmoid backward (which multiplies by p·(1−p) for the same
/// clamped p), the pre-activation gradient reduces to exactly (p − t)/n, so
/// saturated cells still learn.
pub fn matching_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, MatchingError> {
    check_target(pred, target)?;
    let n = pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.to_f64().clamp(LOSS_EPS, 1.0 - LOSS_EPS);
            T::from_f64((p - t.to_f64()) / (p * (1.0 - p)) / n)
        })
        .collect();
    Ok(Tensor::from_vec(pred.shape(), data))
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// One supervised localization example: where in `search` does `template`
/// sit, expressed as a Gaussian label map.
#[derive(Debug, Clone)]
pub struct MatchTrainingPair {
    pub template: TemplatePatch,
    pub search: SearchPatch,
    /// 31×31 Gaussian label with peak exactly 1 at the true-offset cell.
    pub target: Tensor<f32>,
}

impl MatchTrainingPair {
    pub fn new(
        template: TemplatePatch,
        search: SearchPatch,
        offset_cells: (i32, i32),
        sigma: f64,
    ) -> Result<Self, MatchingError> {
        let target = gaussian_target_map(offset_cells, sigma)?;
        Ok(MatchTrainingPair { template, search, target })
    }

    /// The labeled peak cell (row, col).
    pub fn target_cell(&self) -> (usize, usize) {
        let (idx, _) = self.target.argmax();
        (idx / MAP_SIDE, idx % MAP_SIDE)
    }
}

#[derive(Debug, Clone)]
pub struct MatchTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for MatchTrainConfig {
    fn default() -> Self {
        MatchTrainConfig { batch_size: 64, steps: 500, learning_rate: 1e-4 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchTrainLog {
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Total pairs consumed from the stream.
    pub pairs_seen: usize,
}

/// Supervised pretraining with Adam on a stream of labeled pairs. Each step
/// consumes up to `batch_size` pairs; training stops early if the stream
/// runs dry. Gradients are averaged over the batch.
///
/// Deterministic for a fixed stream and rng: per-sample dropout seeds are
/// drawn from `rng` in batch order before the (chunked) parallel section,
/// and chunk gradients are reduced in a fixed order.
pub fn train_matching<I, R>(
    net: &mut MatchingNet<f32>,
    pairs: I,
    cfg: &MatchTrainConfig,
    rng: &mut R,
) -> Result<MatchTrainLog, MatchingError>
where
    I: IntoIterator<Item = MatchTrainingPair>,
    R: Rng,
{
    if cfg.batch_size == 0 {
        return Err(MatchingError::Net(NnError::BadConfig {
            op: "train-matching",
            detail: "batch size must be >= 1".into(),
        }));
    }
    let mut stream = pairs.into_iter();
    let mut log = MatchTrainLog::default();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut total = ParamGrads::zeros_like(&net.params());

    for step in 0..cfg.steps {
        let batch: Vec<MatchTrainingPair> = stream.by_ref().take(cfg.batch_size).collect();
        if batch.is_empty() {
            if step == 0 {
                return Err(MatchingError::EmptyTrainingSet);
            }
            break;
        }
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();

        // Fixed chunking keeps the reduction order independent of thread
        // scheduling, so training is reproducible on any core count.
        let chunk_len = batch.len().div_ceil(4);
        let jobs: Vec<(&[MatchTrainingPair], &[u64])> =
            batch.chunks(chunk_len).zip(seeds.chunks(chunk_len)).collect();
        let partials: Vec<(ParamGrads<f32>, f64)> = jobs
            .into_par_iter()
            .map(|(chunk, chunk_seeds)| {
                let mut grads = ParamGrads::zeros_like(&net.params());
                let mut loss_sum = 0.0f64;
                for (pair, &seed) in chunk.iter().zip(chunk_seeds) {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    let (map, trace) = net
                        .forward_train(pair.template.tensor(), pair.search.tensor(), &mut drop_rng)
                        .expect("validated patch shapes");
                    loss_sum += matching_loss(&map, &pair.target).expect("constructed target");
                    let grad_map = matching_loss_grad(&map, &pair.target).expect("constructed target");
                    net.backward(&trace, &grad_map, &mut grads);
                }
                (grads, loss_sum)
            })
            .collect();

        total.zero();
        let mut loss_sum = 0.0f64;
        for (g, l) in &partials {
            total.add_assign(g);
            loss_sum += l;
        }
        total.scale(1.0 / batch.len() as f32);

        let mut params = net.params_mut();
        total.load_into(&mut params);
        opt.step(&mut params)?;

        log.step_losses.push(loss_sum / batch.len() as f64);
        log.pairs_seen += batch.len();
    }
    Ok(log)
}

/// Fraction of pairs whose inference-mode argmax lands within `tol_cells`
/// (Chebyshev distance) of the labeled cell.
pub fn localization_hit_rate<I>(net: &MatchingNet<f32>, pairs: I, tol_cells: usize) -> f64
where
    I: IntoIterator<Item = MatchTrainingPair>,
{
    let mut hits = 0usize;
    let mut count = 0usize;
    for pair in pairs {
        let map = net.predict(&pair.template, &pair.search);
        let got = map.peak();
        let want = pair.target_cell();
        if chebyshev_cells(got, want) <= tol_cells {
            hits += 1;
        }
        count += 1;
    }
    assert!(count > 0, "hit rate over an empty pair set");
    hits as f64 / count as f64
}

pub(crate) fn chebyshev_cells(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

// ---------------------------------------------------------------------------
// Numerical verification
// ---------------------------------------------------------------------------

/// Every non-smooth decision one forward pass made: pooling routings, relu
/// sign patterns, and output-clamp states. Two passes with equal signatures
/// compute the same smooth function of the parameters.
fn activation_signature<T: Scalar>(trace: &MatchTrace<T>) -> (Vec<u32>, Vec<bool>) {
    let mut routing = Vec::new();
    let mut signs = Vec::new();
    for st in [&trace.template, &trace.search] {
        routing.extend_from_slice(&st.p1_idx);
        routing.extend_from_slice(&st.p2_idx);
        routing.extend_from_slice(&st.p3_idx);
        for t in [&st.a1, &st.ask, &st.a2, &st.a3] {
            signs.extend(t.data().iter().map(|v| *v > T::ZERO));
        }
    }
    signs.extend(trace.a_h1.data().iter().map(|v| *v > T::ZERO));
    signs.extend(trace.a_h2.data().iter().map(|v| *v > T::ZERO));
    let lo = T::from_f64(MAP_VALUE_EPS);
    let hi = T::ONE - lo;
    signs.extend(trace.map.data().iter().flat_map(|v| [*v <= lo, *v >= hi]));
    (routing, signs)
}

/// Central-difference check of the full network at f64, inference mode,
/// against the cross-entropy objective, probing a few parameters in every
/// tensor.
///
/// Relu and max-pooling make the loss piecewise-smooth, so a probe is only
/// compared when the activation pattern is identical at θ±ε; probes that
/// straddle a kink are counted as skipped and replaced. Bias probes shift a
/// whole channel by the full ε, so inputs run at natural scale to keep
/// every kink margin large against the perturbation; only the fc3 weights
/// are scaled down — no relu or pooling follows them — to hold the sigmoid
/// head in its smooth range, where the output clamp (which intentionally
/// decouples the analytic gradient from the locally flat finite difference)
/// never engages.
pub fn gradient_check(seed: u64, probes_per_tensor: usize, eps: f64) -> crate::nn::GradCheckReport {
    use crate::nn::gradcheck::rel_err;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MatchingNet::<f64>::new(&mut rng);
    for w in net.fc3.weights.data_mut() {
        *w /= 64.0;
    }
    let template: Tensor<f64> = Tensor::gaussian(&[TEMPLATE_SIDE, TEMPLATE_SIDE, 3], 0.5, &mut rng);
    let search: Tensor<f64> = Tensor::gaussian(&[SEARCH_SIDE, SEARCH_SIDE, 3], 0.5, &mut rng);
    let target = gaussian_target_map((2, -3), 2.0).expect("in-map target").cast::<f64>();

    let (map, trace) = net.forward(&template, &search).expect("static shapes");
    let smooth = map.data().iter().all(|&v| v > 1e-5 && v < 1.0 - 1e-5);
    assert!(smooth, "gradient check requires an unsaturated, unclamped prediction map");
    let base_sig = activation_signature(&trace);
    let grad_map = matching_loss_grad(&map, &target).expect("constructed target");
    let mut grads = ParamGrads::zeros_like(&net.params());
    net.backward(&trace, &grad_map, &mut grads);

    let mut report = crate::nn::GradCheckReport::default();
    for ti in 0..PARAM_NAMES.len() {
        let numel = net.params()[ti].numel();
        // The conv tensors reject a sizable fraction of probes (stride-3
        // windows overlap, so near-ties in pooling are common), hence the
        // generous replacement budget.
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
            let (map_p, trace_p) = net.forward(&template, &search).expect("static shapes");
            net.params_mut()[ti].data_mut()[ei] = orig - eps;
            let (map_m, trace_m) = net.forward(&template, &search).expect("static shapes");
            net.params_mut()[ti].data_mut()[ei] = orig;
            if activation_signature(&trace_p) != base_sig || activation_signature(&trace_m) != base_sig {
                report.skipped += 1;
                continue;
            }
            let lp = matching_loss(&map_p, &target).expect("constructed target");
            let lm = matching_loss(&map_m, &target).expect("constructed target");
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.tensors[ti].data()[ei];
            report.probes += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
            accepted += 1;
        }
        assert!(accepted > 0, "no valid finite-difference probe for {}", PARAM_NAMES[ti]);
    }
    report
}
