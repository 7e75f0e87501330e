//! Tracking quality metrics and benchmark protocols: overlap (IoU), success
//! curves with their area-under-curve summary, one-pass / temporal- /
//! spatial-robustness evaluation, selection-mode baselines, the template
//! refresh-interval sweep, and deterministic report emission.
//!
//! Reports are plain tab-separated text plus a self-contained SVG success
//! plot, written with fixed float formatting so identical runs re-emit
//! byte-identical files.

use crate::geom::BoundingBox;
use crate::matching::MatchingNet;
use crate::policy::PolicyNet;
use crate::sim::{SequenceSource, Sequence, SimError};
use crate::tracker::{track_sequence, SelectionMode, TrackError, TrackerConfig};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Success curves are sampled at 21 thresholds 0.00, 0.05, ..., 1.00.
pub const CURVE_POINTS: usize = 21;

/// Number of uniform start points in the temporal-robustness protocol.
pub const TRE_SEGMENTS: usize = 20;

#[derive(Debug)]
pub enum EvalError {
    DegenerateBox { w: f32, h: f32 },
    EmptyInput { what: String },
    LengthMismatch { predicted: usize, truth: usize },
    UnknownProtocol { flag: String },
    Io { path: PathBuf, detail: String },
    Track(TrackError),
    Sim(SimError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::DegenerateBox { w, h } => {
                write!(f, "degenerate box {w}x{h} has no overlap measure")
            }
            EvalError::EmptyInput { what } => write!(f, "empty input: {what}"),
            EvalError::LengthMismatch { predicted, truth } => {
                write!(f, "{predicted} predicted boxes vs {truth} ground-truth boxes")
            }
            EvalError::UnknownProtocol { flag } => {
                write!(f, "unknown protocol {flag:?} (expected ope, tre, or sre)")
            }
            EvalError::Io { path, detail } => write!(f, "io error on {}: {detail}", path.display()),
            EvalError::Track(e) => write!(f, "{e}"),
            EvalError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TrackError> for EvalError {
    fn from(e: TrackError) -> Self {
        EvalError::Track(e)
    }
}

impl From<SimError> for EvalError {
    fn from(e: SimError) -> Self {
        EvalError::Sim(e)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Intersection-over-union of two axis-aligned boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f32, EvalError> {
    for bx in [a, b] {
        if bx.is_degenerate() {
            return Err(EvalError::DegenerateBox { w: bx.w, h: bx.h });
        }
    }
    let ix = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0) as f64;
    let iy = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    Ok((inter / union) as f32)
}

/// Per-frame IoU of a tracked run against ground truth.
pub fn iou_series(predicted: &[BoundingBox], truth: &[BoundingBox]) -> Result<Vec<f32>, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch { predicted: predicted.len(), truth: truth.len() });
    }
    predicted.iter().zip(truth).map(|(p, t)| iou(p, t)).collect()
}

/// Fraction of frames whose IoU strictly exceeds each of the 21 thresholds.
/// Strict comparison makes the rate at threshold 1.0 equal zero even for
/// perfect tracking, capping the AUC at 20/21.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCurve {
    rates: [f32; CURVE_POINTS],
}

impl SuccessCurve {
    pub fn thresholds() -> [f32; CURVE_POINTS] {
        std::array::from_fn(|i| i as f32 / 20.0)
    }

    pub fn from_ious(ious: &[f32]) -> Result<Self, EvalError> {
        if ious.is_empty() {
            return Err(EvalError::EmptyInput { what: "success curve needs at least one IoU".into() });
        }
        let n = ious.len() as f32;
        let rates = std::array::from_fn(|i| {
            let t = i as f32 / 20.0;
            ious.iter().filter(|&&v| v > t).count() as f32 / n
        });
        Ok(SuccessCurve { rates })
    }

    fn from_rates(rates: [f32; CURVE_POINTS]) -> Self {
        SuccessCurve { rates }
    }

    pub fn rates(&self) -> &[f32; CURVE_POINTS] {
        &self.rates
    }

    /// Mean of the 21 success rates.
    pub fn auc(&self) -> f32 {
        self.rates.iter().sum::<f32>() / CURVE_POINTS as f32
    }
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// One pass per sequence, initialized from frame-0 ground truth.
    Ope,
    /// Twenty uniform start points per sequence, each run to the end,
    /// aggregated with frame-count weights.
    Tre,
    /// Twelve perturbed frame-0 initializations per sequence (8 shifts,
    /// 4 rescalings) plus an unaggregated identity control run.
    Sre,
}

impl Protocol {
    pub fn from_flag(s: &str) -> Result<Self, EvalError> {
        match s {
            "ope" => Ok(Protocol::Ope),
            "tre" => Ok(Protocol::Tre),
            "sre" => Ok(Protocol::Sre),
            other => Err(EvalError::UnknownProtocol { flag: other.into() }),
        }
    }

    pub fn flag_name(self) -> &'static str {
        match self {
            Protocol::Ope => "ope",
            Protocol::Tre => "tre",
            Protocol::Sre => "sre",
        }
    }
}

/// One tracked pass: which sequence, which initialization variant, and the
/// per-frame overlap it achieved.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub sequence: String,
    pub variant: String,
    pub ious: Vec<f32>,
    pub curve: SuccessCurve,
    /// Control runs (the spatial-robustness identity pass) carry `false`
    /// and stay out of the aggregate.
    pub in_aggregate: bool,
}

/// A full protocol evaluation with its aggregate summary.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub protocol: Protocol,
    pub mode: SelectionMode,
    pub runs: Vec<RunRecord>,
    pub aggregate_curve: SuccessCurve,
    pub aggregate_auc: f32,
    pub config_snapshot: String,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Start frames for the temporal-robustness protocol: `TRE_SEGMENTS`
/// uniform points. Sequences shorter than the grid are not evaluable.
pub fn tre_starts(len: usize) -> Option<Vec<usize>> {
    if len < TRE_SEGMENTS {
        return None;
    }
    Some((0..TRE_SEGMENTS).map(|i| i * len / TRE_SEGMENTS).collect())
}

/// The spatial-robustness initialization set: identity control first
/// (excluded from aggregates), then 8 shifts by 10% of the box size toward
/// the edge centers and corners, then 4 rescalings.
pub fn sre_variants(init: &BoundingBox) -> Vec<(String, BoundingBox, bool)> {
    let dx = 0.1 * init.w;
    let dy = 0.1 * init.h;
    let mut variants = vec![("identity".to_string(), *init, false)];
    let shifts: [(f32, f32, &str); 8] = [
        (-dx, 0.0, "shift_left"),
        (dx, 0.0, "shift_right"),
        (0.0, -dy, "shift_up"),
        (0.0, dy, "shift_down"),
        (-dx, -dy, "shift_up_left"),
        (dx, -dy, "shift_up_right"),
        (-dx, dy, "shift_down_left"),
        (dx, dy, "shift_down_right"),
    ];
    for (sx, sy, name) in shifts {
        variants.push((name.to_string(), init.shifted(sx, sy), true));
    }
    for s in [0.8f32, 0.9, 1.1, 1.2] {
        variants.push((format!("scale_{s:.1}"), init.scaled(s), true));
    }
    variants
}

/// Seed for one (sequence, variant) run, derived so the same run always
/// draws the same random stream: the one-pass run, the temporal run
/// starting at frame 0, and the spatial identity control all share a seed.
fn run_seed(base: u64, sequence: usize, variant: u64) -> u64 {
    base ^ (sequence as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ variant.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

fn config_snapshot(protocol: Protocol, mode: SelectionMode, cfg: &TrackerConfig, seed: u64) -> String {
    format!(
        "protocol={}\nmode={}\nseed={}\npool_capacity={}\nupdate_interval={}\nretain_initial={}\nscale_step={}\nshift_frac={}\nupdates_enabled={}\n",
        protocol.flag_name(),
        mode.flag_name(),
        seed,
        cfg.pool_capacity,
        cfg.update_interval,
        cfg.retain_initial,
        cfg.scale_step,
        cfg.shift_frac,
        cfg.updates_enabled,
    )
}

fn tracked_ious(
    matcher: &MatchingNet<f32>,
    policy: &PolicyNet<f32>,
    seq: &Sequence,
    start: usize,
    init: BoundingBox,
    mode: SelectionMode,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<Vec<f32>, EvalError> {
    let boxes = track_sequence(matcher, policy, &seq.frames[start..], init, mode, cfg, seed)?;
    iou_series(&boxes, &seq.ground_truth[start..])
}

/// Runs one protocol over every sequence in `source` and aggregates.
/// One-pass and spatial aggregates average per-run AUCs; the temporal
/// aggregate weights each run by its frame count.
pub fn run_protocol(
    matcher: &MatchingNet<f32>,
    policy: &PolicyNet<f32>,
    source: &dyn SequenceSource,
    protocol: Protocol,
    mode: SelectionMode,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<EvalRun, EvalError> {
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for si in 0..source.count() {
        let seq = source.load(si)?;
        match protocol {
            Protocol::Ope => {
                let ious = tracked_ious(
                    matcher, policy, &seq, 0, seq.ground_truth[0], mode, cfg,
                    run_seed(seed, si, 0),
                )?;
                runs.push(RunRecord {
                    sequence: seq.name.clone(),
                    variant: "full".into(),
                    curve: SuccessCurve::from_ious(&ious)?,
                    ious,
                    in_aggregate: true,
                });
            }
            Protocol::Tre => {
                let Some(starts) = tre_starts(seq.len()) else {
                    warnings.push(format!(
                        "{}: {} frames are fewer than the {TRE_SEGMENTS}-segment grid; skipped",
                        seq.name,
                        seq.len()
                    ));
                    continue;
                };
                for start in starts {
                    let ious = tracked_ious(
                        matcher, policy, &seq, start, seq.ground_truth[start], mode, cfg,
                        run_seed(seed, si, start as u64),
                    )?;
                    runs.push(RunRecord {
                        sequence: seq.name.clone(),
                        variant: format!("start_{start:04}"),
                        curve: SuccessCurve::from_ious(&ious)?,
                        ious,
                        in_aggregate: true,
                    });
                }
            }
            Protocol::Sre => {
                for (vi, (label, init, counted)) in
                    sre_variants(&seq.ground_truth[0]).into_iter().enumerate()
                {
                    let ious = tracked_ious(
                        matcher, policy, &seq, 0, init, mode, cfg,
                        run_seed(seed, si, vi as u64),
                    )?;
                    runs.push(RunRecord {
                        sequence: seq.name.clone(),
                        variant: label,
                        curve: SuccessCurve::from_ious(&ious)?,
                        ious,
                        in_aggregate: counted,
                    });
                }
            }
        }
    }

    let (aggregate_curve, aggregate_auc) = aggregate(protocol, &runs)?;
    Ok(EvalRun {
        protocol,
        mode,
        runs,
        aggregate_curve,
        aggregate_auc,
        config_snapshot: config_snapshot(protocol, mode, cfg, seed),
        seed,
        warnings,
    })
}

fn aggregate(protocol: Protocol, runs: &[RunRecord]) -> Result<(SuccessCurve, f32), EvalError> {
    let mut weight_sum = 0.0f64;
    let mut auc_sum = 0.0f64;
    let mut rate_sums = [0.0f64; CURVE_POINTS];
    for r in runs.iter().filter(|r| r.in_aggregate) {
        let w = if protocol == Protocol::Tre { r.ious.len() as f64 } else { 1.0 };
        weight_sum += w;
        auc_sum += w * r.curve.auc() as f64;
        for (acc, &rate) in rate_sums.iter_mut().zip(r.curve.rates()) {
            *acc += w * rate as f64;
        }
    }
    if weight_sum == 0.0 {
        return Err(EvalError::EmptyInput { what: "no evaluable runs (every sequence skipped?)".into() });
    }
    let rates = std::array::from_fn(|i| (rate_sums[i] / weight_sum) as f32);
    Ok((SuccessCurve::from_rates(rates), (auc_sum / weight_sum) as f32))
}

// ---------------------------------------------------------------------------
// Baselines and sweep
// ---------------------------------------------------------------------------

/// The four standard selection-mode baselines, most capable first.
pub fn baseline_modes() -> [SelectionMode; 4] {
    [
        SelectionMode::PolicyGreedy,
        SelectionMode::MapMax,
        SelectionMode::UniformRandom,
        SelectionMode::InitialOnly,
    ]
}

/// Evaluates one protocol under several selection modes, same seed.
pub fn run_baselines(
    matcher: &MatchingNet<f32>,
    policy: &PolicyNet<f32>,
    source: &dyn SequenceSource,
    protocol: Protocol,
    modes: &[SelectionMode],
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<Vec<EvalRun>, EvalError> {
    modes
        .iter()
        .map(|&m| run_protocol(matcher, policy, source, protocol, m, cfg, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub interval: u64,
    pub auc: f32,
}

/// One-pass evaluation per template refresh interval.
pub fn run_interval_sweep(
    matcher: &MatchingNet<f32>,
    policy: &PolicyNet<f32>,
    source: &dyn SequenceSource,
    mode: SelectionMode,
    base_cfg: &TrackerConfig,
    intervals: &[u64],
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(intervals.len());
    for &interval in intervals {
        let cfg = TrackerConfig { update_interval: interval, ..base_cfg.clone() };
        let run = run_protocol(matcher, policy, source, Protocol::Ope, mode, &cfg, seed)?;
        rows.push(SweepRow { interval, auc: run.aggregate_auc });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

const SRE_NOTE: &str = "spatial-robustness convention: 12 perturbed initializations \
(8 shifts by 10% of box size toward edge centers and corners, 4 rescalings \
0.8/0.9/1.1/1.2); the unperturbed pass is emitted as an identity control run \
excluded from the aggregate";

fn report_header(run: &EvalRun, kind: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!("# {kind}\n"));
    s.push_str(&format!(
        "# protocol={} mode={} seed={}\n",
        run.protocol.flag_name(),
        run.mode.flag_name(),
        run.seed
    ));
    s.push_str(&format!("# aggregate_auc={:.6}\n", run.aggregate_auc));
    s.push_str(&format!("# {SRE_NOTE}\n"));
    for w in &run.warnings {
        s.push_str(&format!("# warning: {w}\n"));
    }
    s
}

fn svg_plot(run: &EvalRun) -> String {
    let x = |t: f64| 70.0 + t * 550.0;
    let y = |r: f64| 390.0 - r * 350.0;
    let mut s = String::new();
    s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 660 440\" font-family=\"monospace\" font-size=\"13\">\n");
    s.push_str(&format!(
        "<title>success plot protocol={} mode={} seed={}</title>\n",
        run.protocol.flag_name(),
        run.mode.flag_name(),
        run.seed
    ));
    s.push_str("<rect x=\"0\" y=\"0\" width=\"660\" height=\"440\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"70\" y=\"22\">success plot  protocol={} mode={} seed={}  AUC={:.4}</text>\n",
        run.protocol.flag_name(),
        run.mode.flag_name(),
        run.seed,
        run.aggregate_auc
    ));
    // Axes with ticks every 0.2.
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        x(0.0), y(0.0), x(1.0), y(0.0)
    ));
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        x(0.0), y(0.0), x(0.0), y(1.0)
    ));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            x(v), y(0.0), x(v), y(0.0) + 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{:.1}</text>\n",
            x(v), y(0.0) + 20.0, v
        ));
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            x(0.0) - 5.0, y(v), x(0.0), y(v)
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.1}</text>\n",
            x(0.0) - 9.0, y(v) + 4.0, v
        ));
    }
    s.push_str("<text x=\"345\" y=\"430\" text-anchor=\"middle\">IoU threshold</text>\n");
    s.push_str("<text x=\"16\" y=\"215\" text-anchor=\"middle\" transform=\"rotate(-90 16 215)\">success rate</text>\n");
    // The aggregate curve: one point per threshold row of the table.
    let pts: Vec<(f64, f64)> = SuccessCurve::thresholds()
        .iter()
        .zip(run.aggregate_curve.rates())
        .map(|(&t, &r)| (x(t as f64), y(r as f64)))
        .collect();
    let path: Vec<String> = pts.iter().map(|(px, py)| format!("{px:.2},{py:.2}")).collect();
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"{}\"/>\n",
        path.join(" ")
    ));
    for (px, py) in &pts {
        s.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"#1f6fb2\"/>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the three tab-separated tables (per-frame IoU, per-run AUC,
/// aggregate curve) and the SVG success plot. File names embed protocol,
/// mode, and seed; identical runs re-emit byte-identical files. Returns
/// the written paths.
pub fn emit_report(run: &EvalRun, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| EvalError::Io { path: out_dir.to_path_buf(), detail: e.to_string() })?;
    let stem = format!(
        "{}_{}_s{}",
        run.protocol.flag_name(),
        run.mode.flag_name(),
        run.seed
    );

    let mut ious = report_header(run, "per-frame iou table");
    ious.push_str("sequence\tvariant\tframe\tiou\n");
    for r in &run.runs {
        for (i, v) in r.ious.iter().enumerate() {
            ious.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.sequence, r.variant, i, v));
        }
    }

    let mut aucs = report_header(run, "per-run auc table");
    aucs.push_str("sequence\tvariant\tframes\tauc\tin_aggregate\n");
    for r in &run.runs {
        aucs.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\n",
            r.sequence,
            r.variant,
            r.ious.len(),
            r.curve.auc(),
            r.in_aggregate
        ));
    }

    let mut agg = report_header(run, "aggregate success curve");
    for line in run.config_snapshot.lines() {
        agg.push_str(&format!("# cfg {line}\n"));
    }
    agg.push_str("threshold\tsuccess_rate\n");
    for (t, r) in SuccessCurve::thresholds().iter().zip(run.aggregate_curve.rates()) {
        agg.push_str(&format!("{t:.2}\t{r:.6}\n"));
    }

    let files = [
        (format!("{stem}_ious.tsv"), ious),
        (format!("{stem}_auc.tsv"), aucs),
        (format!("{stem}_aggregate.tsv"), agg),
        (format!("{stem}_curve.svg"), svg_plot(run)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, content) in files {
        let path = out_dir.join(name);
        fs::write(&path, content)
            .map_err(|e| EvalError::Io { path: path.clone(), detail: e.to_string() })?;
        paths.push(path);
    }
    Ok(paths)
}
