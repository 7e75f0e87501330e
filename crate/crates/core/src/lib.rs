//! A compact visual tracker built around two small networks: a Siamese
//! matcher that scores a template against a search window, and a learned
//! selection policy that decides which template from a maintained pool to
//! trust on each frame. Everything runs on the CPU with no external runtime.

pub mod eval;
pub mod geom;
pub mod img;
pub mod matching;
pub mod nn;
pub mod policy;
pub mod pool;
pub mod sim;
pub mod tracker;
pub mod trainer;

pub use eval::{EvalRun, Protocol, SuccessCurve};
pub use geom::BoundingBox;
pub use img::Image;
pub use matching::{MatchTrainingPair, MatchingNet, PredictionMap, SearchPatch, TemplatePatch};
pub use nn::Tensor;
pub use policy::{PolicyNet, PolicyScores};
pub use pool::{Template, TemplatePool};
pub use sim::{Sequence, SequenceSource, SyntheticSpec};
pub use tracker::{FrameResult, SelectionMode, Tracker, TrackerConfig};
pub use trainer::{Experience, Outcome, ReplayMemory, ReplayPlan, TrainConfig, TrainReport};
