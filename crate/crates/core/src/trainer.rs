//! Policy training: episodic REINFORCE with a discount on the per-frame
//! log-policy gradients, a success/failure outcome judged on the final
//! frames of each episode, signed updates, and two bounded replay buffers
//! (successes and failures kept apart) whose samples are re-differentiated
//! under the current weights on every step.
//!
//! The matcher stays frozen throughout: it is borrowed immutably, and the
//! tests additionally pin its weights by value.
//!
//! Update plumbing: for each episode, the signed episodic gradient and the
//! signed replay gradient are summed into one composite ascent direction,
//! which is fed (negated) to a single Adagrad descent step. The raw
//! additive form `θ ± Δθ` is kept as [`apply_episode_update`] for direct
//! use and for tests of the sign convention.

use crate::eval::{iou_series, EvalError};
use crate::geom::BoundingBox;
use crate::matching::{MatchingError, MatchingNet, PredictionMap};
use crate::nn::{NnError, Optimizer, ParamGrads, Scalar};
use crate::policy::{PolicyError, PolicyNet};
use crate::sim::{sample_episode, Sequence, SequenceSource, SimError};
use crate::nn::store::StoreError;
use crate::tracker::{SelectionMode, TrackError, Tracker, TrackerConfig};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

/// Default capacity of each replay buffer.
pub const REPLAY_CAPACITY: usize = 5000;

#[derive(Debug)]
pub enum TrainError {
    BadConfig { detail: String },
    WindowTooLong { frames: usize, window: usize },
    LengthMismatch { predicted: usize, truth: usize },
    GradLayout { expected: usize, found: usize },
    Track(TrackError),
    Policy(PolicyError),
    Matching(MatchingError),
    Sim(SimError),
    Eval(EvalError),
    Nn(NnError),
    Store(StoreError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig { detail } => write!(f, "bad training config: {detail}"),
            TrainError::WindowTooLong { frames, window } => {
                write!(f, "episode of {frames} frames cannot fill a {window}-frame outcome window")
            }
            TrainError::LengthMismatch { predicted, truth } => {
                write!(f, "{predicted} predicted boxes vs {truth} ground-truth boxes")
            }
            TrainError::GradLayout { expected, found } => {
                write!(f, "update holds {found} tensors, the policy has {expected} parameters")
            }
            TrainError::Track(e) => write!(f, "{e}"),
            TrainError::Policy(e) => write!(f, "{e}"),
            TrainError::Matching(e) => write!(f, "{e}"),
            TrainError::Sim(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
            TrainError::Nn(e) => write!(f, "{e}"),
            TrainError::Store(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for TrainError {
            fn from(e: $ty) -> Self {
                TrainError::$variant(e)
            }
        }
    };
}
from_err!(Track, TrackError);
from_err!(Policy, PolicyError);
from_err!(Matching, MatchingError);
from_err!(Sim, SimError);
from_err!(Eval, EvalError);
from_err!(Nn, NnError);
from_err!(Store, StoreError);

// ---------------------------------------------------------------------------
// Outcomes and experiences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    /// Reward sign folded into updates: +1 for success, −1 for failure.
    pub fn sign(self) -> f32 {
        match self {
            Outcome::Success => 1.0,
            Outcome::Failure => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        }
    }
}

/// One decision made during a rollout: the state (every template's response
/// map) and the sampled action, recorded before the episode's outcome is
/// known.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub maps: Vec<PredictionMap>,
    pub action: usize,
}

/// A step stamped with its episode's outcome, as stored in replay memory.
#[derive(Debug, Clone)]
pub struct Experience {
    pub maps: Vec<PredictionMap>,
    pub action: usize,
    pub outcome: Outcome,
}

impl Experience {
    pub fn new(maps: Vec<PredictionMap>, action: usize, outcome: Outcome) -> Result<Self, TrainError> {
        if maps.is_empty() || action >= maps.len() {
            return Err(TrainError::BadConfig {
                detail: format!("action {action} outside a state of {} maps", maps.len()),
            });
        }
        Ok(Experience { maps, action, outcome })
    }
}

/// Two bounded FIFO queues, successes and failures kept strictly apart.
#[derive(Debug, Clone, Default)]
pub struct ReplayMemory {
    success: VecDeque<Experience>,
    failure: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        ReplayMemory { success: VecDeque::new(), failure: VecDeque::new(), capacity }
    }

    pub fn success_len(&self) -> usize {
        self.success.len()
    }

    pub fn failure_len(&self) -> usize {
        self.failure.len()
    }

    fn buffer(&self, outcome: Outcome) -> &VecDeque<Experience> {
        match outcome {
            Outcome::Success => &self.success,
            Outcome::Failure => &self.failure,
        }
    }

    fn push(&mut self, exp: Experience) {
        let buf = match exp.outcome {
            Outcome::Success => &mut self.success,
            Outcome::Failure => &mut self.failure,
        };
        buf.push_back(exp);
        while buf.len() > self.capacity {
            buf.pop_front();
        }
    }
}

/// Appends every step of an episode to the buffer matching its outcome,
/// evicting the oldest entries beyond capacity.
pub fn push_experiences(
    memory: &mut ReplayMemory,
    steps: Vec<StepRecord>,
    outcome: Outcome,
) -> Result<(), TrainError> {
    for s in steps {
        memory.push(Experience::new(s.maps, s.action, outcome)?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How many replay experiences to draw from each buffer per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayPlan {
    /// Twice the episode length from each buffer, so one training step sums
    /// up to 5L gradient terms (L episodic + 4L replayed).
    TwicePerFrame,
    /// A fixed draw per buffer regardless of episode length.
    Fixed(usize),
}

impl ReplayPlan {
    pub fn draws(self, episode_steps: usize) -> usize {
        match self {
            ReplayPlan::TwicePerFrame => 2 * episode_steps,
            ReplayPlan::Fixed(n) => n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Adagrad step size for the composite update.
    pub learning_rate: f64,
    /// Per-frame discount on episodic log-policy gradients, in (0, 1].
    pub discount: f64,
    /// Episodes to train for.
    pub episodes: usize,
    /// Template pool capacity during rollouts.
    pub pool_capacity: usize,
    /// Pool refresh interval (frames) during rollouts.
    pub update_interval: u64,
    /// An episode fails when the mean IoU over the outcome window is
    /// strictly below this.
    pub failure_iou: f32,
    /// Number of final frames the outcome is judged on.
    pub outcome_window: usize,
    pub replay: ReplayPlan,
    pub replay_capacity: usize,
    /// Save policy weights every this many episodes (into the directory
    /// given to [`train_policy`]).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            discount: 0.95,
            episodes: 2000,
            pool_capacity: 4,
            update_interval: 50,
            failure_iou: 0.2,
            outcome_window: 20,
            replay: ReplayPlan::TwicePerFrame,
            replay_capacity: REPLAY_CAPACITY,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |detail: String| Err(TrainError::BadConfig { detail });
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad(format!("discount {} must lie in (0, 1]", self.discount));
        }
        if !(self.failure_iou > 0.0 && self.failure_iou < 1.0) {
            return bad(format!("failure threshold {} must lie in (0, 1)", self.failure_iou));
        }
        if self.pool_capacity < 1 || self.update_interval < 1 || self.outcome_window < 1 {
            return bad("pool capacity, update interval, and outcome window must be >= 1".into());
        }
        if let ReplayPlan::Fixed(0) = self.replay {
            return bad("a fixed replay draw of 0 disables replay; use Fixed(n > 0)".into());
        }
        Ok(())
    }

    fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            pool_capacity: self.pool_capacity,
            update_interval: self.update_interval,
            ..TrackerConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient accumulation
// ---------------------------------------------------------------------------

/// Discounted sum of per-step gradients: with S steps, step `t` (0-based)
/// carries weight `discount^(S−1−t)`, so the final decision is undiscounted
/// and earlier ones fade geometrically. `discount = 1` is the plain sum.
pub fn discounted_sum<T: Scalar>(per_step: &[ParamGrads<T>], discount: T) -> ParamGrads<T> {
    let mut acc = ParamGrads {
        tensors: per_step
            .first()
            .map(|g| g.tensors.iter().map(|t| crate::nn::Tensor::zeros(t.shape())).collect())
            .unwrap_or_default(),
    };
    let mut weight = T::ONE;
    for g in per_step.iter().rev() {
        acc.add_scaled(g, weight);
        weight = weight * discount;
    }
    acc
}

/// Everything one rollout produces: the per-frame decisions, the already
/// discount-summed (unsigned) gradient, and the predicted boxes.
#[derive(Debug)]
pub struct EpisodeRollout {
    pub steps: Vec<StepRecord>,
    pub delta: ParamGrads<f32>,
    pub boxes: Vec<BoundingBox>,
}

/// Rolls the tracker over an episode with stochastic template selection and
/// accumulates Eq-style discounted log-policy gradients, treating each
/// sampled action as if it were the right one; the outcome later supplies
/// the sign. The policy is read-only here; `rng` drives both the action
/// sampling and the dropout masks of the gradient-bearing forward passes.
pub fn run_training_episode(
    matcher: &MatchingNet<f32>,
    policy: &PolicyNet<f32>,
    episode: &Sequence,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRollout, TrainError> {
    cfg.validate()?;
    let mut tracker = Tracker::new(
        matcher,
        policy,
        &episode.frames[0],
        episode.ground_truth[0],
        SelectionMode::PolicySample,
        cfg.tracker_config(),
        rng.random::<u64>(),
    )?;
    let mut steps = Vec::with_capacity(episode.len().saturating_sub(1));
    let mut boxes = Vec::with_capacity(episode.len());
    boxes.push(episode.ground_truth[0]);
    for frame in &episode.frames[1..] {
        let fr = tracker.track_frame(frame)?;
        steps.push(StepRecord { maps: fr.maps, action: fr.chosen_template });
        boxes.push(fr.bbox);
    }

    let mut per_step = Vec::with_capacity(steps.len());
    for step in &steps {
        per_step.push(step_gradient(policy, step.maps.as_slice(), step.action, rng)?);
    }
    let delta = discounted_sum(&per_step, cfg.discount as f32);
    Ok(EpisodeRollout { steps, delta, boxes })
}

/// ∇θ log π(action | maps) under the current weights, with training-mode
/// dropout drawn from `rng`.
fn step_gradient(
    policy: &PolicyNet<f32>,
    maps: &[PredictionMap],
    action: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamGrads<f32>, TrainError> {
    let tensors: Vec<crate::nn::Tensor<f32>> = maps.iter().map(|m| m.values().clone()).collect();
    let fwd = policy.forward_all_train(&tensors, rng)?;
    let mut grads = ParamGrads::zeros_like(&policy.params());
    policy.log_policy_gradient(&fwd, action, &mut grads)?;
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Outcome evaluation and updates
// ---------------------------------------------------------------------------

/// Judges an episode on its final `outcome_window` frames: failure iff
/// their mean IoU is strictly below the threshold, so a boundary mean is a
/// success. Returns the outcome together with the window mean.
pub fn evaluate_episode(
    predicted: &[BoundingBox],
    truth: &[BoundingBox],
    cfg: &TrainConfig,
) -> Result<(Outcome, f32), TrainError> {
    if predicted.len() != truth.len() {
        return Err(TrainError::LengthMismatch { predicted: predicted.len(), truth: truth.len() });
    }
    if predicted.len() < cfg.outcome_window {
        return Err(TrainError::WindowTooLong {
            frames: predicted.len(),
            window: cfg.outcome_window,
        });
    }
    let tail = predicted.len() - cfg.outcome_window;
    let ious = iou_series(&predicted[tail..], &truth[tail..])?;
    let mean = ious.iter().map(|&v| v as f64).sum::<f64>() / ious.len() as f64;
    let outcome = if mean < cfg.failure_iou as f64 { Outcome::Failure } else { Outcome::Success };
    Ok((outcome, mean as f32))
}

/// The raw additive update of the episodic algorithm: θ + Δθ on success,
/// θ − Δθ on failure.
pub fn apply_episode_update(
    policy: &mut PolicyNet<f32>,
    delta: &ParamGrads<f32>,
    outcome: Outcome,
) -> Result<(), TrainError> {
    let mut params = policy.params_mut();
    if delta.tensors.len() != params.len() {
        return Err(TrainError::GradLayout { expected: params.len(), found: delta.tensors.len() });
    }
    let sign = outcome.sign();
    for (p, d) in params.iter_mut().zip(&delta.tensors) {
        if p.shape() != d.shape() {
            return Err(TrainError::GradLayout { expected: params.len(), found: delta.tensors.len() });
        }
        for (x, g) in p.data_mut().iter_mut().zip(d.data()) {
            *x += sign * g;
        }
    }
    Ok(())
}

/// Uniformly draws up to `draws_per_buffer` experiences (without
/// replacement) from each buffer, recomputes each log-policy gradient under
/// the **current** weights, signs it by the stored outcome, and sums —
/// undiscounted, since an experience's position in its source episode is
/// not kept. Returns the summed gradient and the per-buffer term counts.
pub fn replay_gradient(
    policy: &PolicyNet<f32>,
    memory: &ReplayMemory,
    draws_per_buffer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrads<f32>, [usize; 2]), TrainError> {
    let mut total = ParamGrads::zeros_like(&policy.params());
    let mut counts = [0usize; 2];
    for (slot, outcome) in [(0, Outcome::Success), (1, Outcome::Failure)] {
        let buf = memory.buffer(outcome);
        let n = draws_per_buffer.min(buf.len());
        if n == 0 {
            continue;
        }
        for idx in sample_indices(rng, buf.len(), n) {
            let exp = &buf[idx];
            let g = step_gradient(policy, &exp.maps, exp.action, rng)?;
            total.add_scaled(&g, exp.outcome.sign());
            counts[slot] += 1;
        }
    }
    Ok((total, counts))
}

/// The direct replay op: θ += α · (signed replay-gradient sum). The main
/// training loop instead folds the replay gradient into the composite
/// optimizer step; this form exists for isolated use and tests.
pub fn replay_update(
    policy: &mut PolicyNet<f32>,
    memory: &ReplayMemory,
    episode_steps: usize,
    plan: ReplayPlan,
    alpha: f32,
    rng: &mut ChaCha8Rng,
) -> Result<[usize; 2], TrainError> {
    let (mut g, counts) = replay_gradient(policy, memory, plan.draws(episode_steps), rng)?;
    g.scale(alpha);
    apply_episode_update(policy, &g, Outcome::Success)?;
    Ok(counts)
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub episode: usize,
    pub length: usize,
    pub outcome: Outcome,
    pub window_mean_iou: f32,
    pub cumulative_success_rate: f32,
    pub success_buffer: usize,
    pub failure_buffer: usize,
}

impl EpisodeLog {
    /// Tab-separated record, one per episode.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            self.episode,
            self.length,
            self.outcome.label(),
            self.window_mean_iou,
            self.cumulative_success_rate,
            self.success_buffer,
            self.failure_buffer
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub logs: Vec<EpisodeLog>,
}

impl TrainReport {
    /// The whole log as delimiter-separated text with a header line.
    pub fn log_text(&self) -> String {
        let mut s = String::from(
            "episode\tlength\toutcome\twindow_mean_iou\tcumulative_success_rate\tsuccess_buffer\tfailure_buffer\n",
        );
        for l in &self.logs {
            s.push_str(&l.to_line());
            s.push('\n');
        }
        s
    }

    /// Success rate over a trailing window of the log, for trend checks.
    pub fn window_success_rate(&self, start: usize, len: usize) -> f32 {
        let slice = &self.logs[start..(start + len).min(self.logs.len())];
        if slice.is_empty() {
            return 0.0;
        }
        slice.iter().filter(|l| l.outcome == Outcome::Success).count() as f32 / slice.len() as f32
    }
}

/// Trains the selection policy against a frozen matcher: per episode —
/// sample a slice, roll it out with stochastic selection, judge the
/// outcome, push the experiences, then apply ONE Adagrad step on the
/// composite gradient (signed episodic + signed replay, negated into the
/// optimizer's descent convention). Checkpoints, when configured, are
/// written into `checkpoint_dir`.
pub fn train_policy(
    matcher: &MatchingNet<f32>,
    policy: &mut PolicyNet<f32>,
    source: &dyn SequenceSource,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Optimizer::<f32>::adagrad(cfg.learning_rate);
    let mut memory = ReplayMemory::new(cfg.replay_capacity);
    let mut report = TrainReport::default();
    let mut successes = 0usize;

    for episode in 0..cfg.episodes {
        let slice = sample_episode(source, &mut rng)?;
        let sequence = source.load(slice.sequence)?;
        let sub = sequence.slice(slice.start, slice.length)?;
        drop(sequence);

        let rollout = run_training_episode(matcher, policy, &sub, cfg, &mut rng)?;
        let (outcome, window_mean) = evaluate_episode(&rollout.boxes, &sub.ground_truth, cfg)?;
        if outcome == Outcome::Success {
            successes += 1;
        }

        let steps = rollout.steps.len();
        let mut composite = rollout.delta;
        composite.scale(outcome.sign());
        push_experiences(&mut memory, rollout.steps, outcome)?;
        let (replayed, _) = replay_gradient(policy, &memory, cfg.replay.draws(steps), &mut rng)?;
        composite.add_assign(&replayed);

        // The composite is an ascent direction; the optimizer descends.
        composite.scale(-1.0);
        let mut params = policy.params_mut();
        composite.load_into(&mut params);
        optimizer.step(&mut params)?;
        drop(params);

        report.logs.push(EpisodeLog {
            episode,
            length: slice.length,
            outcome,
            window_mean_iou: window_mean,
            cumulative_success_rate: successes as f32 / (episode + 1) as f32,
            success_buffer: memory.success_len(),
            failure_buffer: memory.failure_len(),
        });

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, checkpoint_dir) {
            if every > 0 && (episode + 1) % every == 0 {
                policy.save(&dir.join(format!("policy_ep{:05}.rdtw", episode + 1)))?;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Bandit convergence harness
// ---------------------------------------------------------------------------

/// Result of the two-template bandit run: how often greedy selection picks
/// the informative template on fresh states after training.
#[derive(Debug, Clone, Copy)]
pub struct BanditReport {
    pub greedy_accuracy: f32,
    pub episodes: usize,
}

/// A two-template selection task with no tracking in the loop: one state
/// map is informative (low background, one bright peak), the other is pure
/// noise. Picking the informative template is a success, picking noise is a
/// failure; each single-decision episode applies one signed REINFORCE
/// update through Adagrad. Convergence here isolates the policy-update
/// machinery from the matcher.
pub struct BanditEnv {
    rng: ChaCha8Rng,
}

impl BanditEnv {
    pub fn new(seed: u64) -> Self {
        BanditEnv { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// One fresh state: (maps, index of the informative template).
    pub fn state(&mut self) -> (Vec<PredictionMap>, usize) {
        use crate::matching::MAP_SIDE;
        let rng = &mut self.rng;
        let informative_first: bool = rng.random_bool(0.5);
        let mut informative = vec![0.0f32; MAP_SIDE * MAP_SIDE];
        for v in informative.iter_mut() {
            *v = rng.random_range(0.02..0.12);
        }
        let (pr, pc) = (rng.random_range(2..MAP_SIDE - 2), rng.random_range(2..MAP_SIDE - 2));
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let r = (pr as i64 + dr) as usize;
                let c = (pc as i64 + dc) as usize;
                informative[r * MAP_SIDE + c] = rng.random_range(0.75..0.95);
            }
        }
        let mut noise = vec![0.0f32; MAP_SIDE * MAP_SIDE];
        for v in noise.iter_mut() {
            *v = rng.random_range(0.05..0.95);
        }
        let to_map = |vals: Vec<f32>| {
            PredictionMap::new(crate::nn::Tensor::from_vec(&[MAP_SIDE, MAP_SIDE], vals))
                .expect("bandit maps stay inside (0, 1)")
        };
        let (a, b) = (to_map(informative), to_map(noise));
        if informative_first {
            (vec![a, b], 0)
        } else {
            (vec![b, a], 1)
        }
    }
}

/// Trains `policy` on the bandit for `episodes` single-decision episodes
/// with Adagrad at `learning_rate`, then measures greedy accuracy on 200
/// held-out states. Fully seeded and deterministic.
pub fn run_bandit_convergence(
    policy: &mut PolicyNet<f32>,
    episodes: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<BanditReport, TrainError> {
    let mut env = BanditEnv::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let mut optimizer = Optimizer::<f32>::adagrad(learning_rate);
    for _ in 0..episodes {
        let (maps, informative) = env.state();
        let scores = policy.score_templates(&maps)?;
        let action = crate::policy::sample_action(&scores, &mut rng);
        let outcome = if action == informative { Outcome::Success } else { Outcome::Failure };
        let mut g = step_gradient(policy, &maps, action, &mut rng)?;
        g.scale(-outcome.sign());
        let mut params = policy.params_mut();
        g.load_into(&mut params);
        optimizer.step(&mut params)?;
    }

    let mut hits = 0usize;
    let probes = 200;
    for _ in 0..probes {
        let (maps, informative) = env.state();
        let scores = policy.score_templates(&maps)?;
        if crate::policy::greedy_action(&scores) == informative {
            hits += 1;
        }
    }
    Ok(BanditReport { greedy_accuracy: hits as f32 / probes as f32, episodes })
}
