//! Sequence supply: a deterministic synthetic generator with exact ground
//! truth, plus a loader/writer for the common benchmark on-disk layout
//! (one directory per sequence holding `groundtruth_rect.txt` and numbered
//! frames under `img/`).
//!
//! Synthetic scenes are textured patches composited at integer positions on
//! a textured background, so the box of the planted patch IS the ground
//! truth — no annotation slack. Frames are quantized to the 8-bit grid at
//! generation time, which makes the PNG round trip bit-exact.
//!
//! Spec files are line-oriented `key=value` text:
//!
//! ```text
//! length=120
//! canvas_h=240
//! canvas_w=240
//! target_w=40
//! target_h=40
//! motion=random-walk          # or: linear
//! motion_step=2.0             # random-walk; linear uses motion_dx/motion_dy
//! texture_seed=7
//! perturb=occlusion:44:60:0.85   # kind:start:end:magnitude
//! ```

use crate::geom::BoundingBox;
use crate::img::{Image, ImageIoError};
use crate::matching::{
    displacement_to_cell, MatchTrainingPair, MatchingError, SearchPatch, TemplatePatch,
    MAP_CENTER, SEARCH_SIDE, TEMPLATE_SIDE,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Episode length bounds used when sampling training slices.
pub const MIN_EPISODE: usize = 30;
pub const MAX_EPISODE: usize = 300;

/// Width (in map cells) of the Gaussian training label.
pub const TARGET_SIGMA: f64 = 2.0;

#[derive(Debug)]
pub enum SimError {
    BadSpec { detail: String },
    TargetTooLarge { target: (usize, usize), canvas: (usize, usize) },
    NoEligibleSequence { min_len: usize },
    Parse { path: PathBuf, line: usize, detail: String },
    CountMismatch { path: PathBuf, frames: usize, annotations: usize },
    Io { path: PathBuf, detail: String },
    Image(ImageIoError),
    BadSequence { detail: String },
    Matching(MatchingError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::BadSpec { detail } => write!(f, "bad synthetic spec: {detail}"),
            SimError::TargetTooLarge { target, canvas } => write!(
                f,
                "target {}x{} does not fit canvas {}x{}",
                target.0, target.1, canvas.0, canvas.1
            ),
            SimError::NoEligibleSequence { min_len } => {
                write!(f, "no sequence holds at least {min_len} frames")
            }
            SimError::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            SimError::CountMismatch { path, frames, annotations } => write!(
                f,
                "{}: {frames} frames but {annotations} annotation lines",
                path.display()
            ),
            SimError::Io { path, detail } => write!(f, "io error on {}: {detail}", path.display()),
            SimError::Image(e) => write!(f, "{e}"),
            SimError::BadSequence { detail } => write!(f, "bad sequence: {detail}"),
            SimError::Matching(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<ImageIoError> for SimError {
    fn from(e: ImageIoError) -> Self {
        SimError::Image(e)
    }
}

impl From<MatchingError> for SimError {
    fn from(e: MatchingError) -> Self {
        SimError::Matching(e)
    }
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// Frames plus one ground-truth box per frame.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub ground_truth: Vec<BoundingBox>,
    pub name: String,
}

impl Sequence {
    pub fn new(frames: Vec<Image>, ground_truth: Vec<BoundingBox>, name: String) -> Result<Self, SimError> {
        if frames.is_empty() {
            return Err(SimError::BadSequence { detail: "a sequence needs at least one frame".into() });
        }
        if frames.len() != ground_truth.len() {
            return Err(SimError::BadSequence {
                detail: format!("{} frames but {} boxes", frames.len(), ground_truth.len()),
            });
        }
        if let Some(b) = ground_truth.iter().find(|b| b.is_degenerate()) {
            return Err(SimError::BadSequence {
                detail: format!("degenerate ground-truth box {}x{}", b.w, b.h),
            });
        }
        Ok(Sequence { frames, ground_truth, name })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The contiguous sub-sequence an episode slice denotes.
    pub fn slice(&self, start: usize, length: usize) -> Result<Sequence, SimError> {
        if length == 0 || start + length > self.len() {
            return Err(SimError::BadSequence {
                detail: format!(
                    "slice [{start}, {}) exceeds sequence of length {}",
                    start + length,
                    self.len()
                ),
            });
        }
        Ok(Sequence {
            frames: self.frames[start..start + length].to_vec(),
            ground_truth: self.ground_truth[start..start + length].to_vec(),
            name: format!("{}[{start}+{length}]", self.name),
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MotionModel {
    Linear { dx: f32, dy: f32 },
    RandomWalk { max_step: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationKind {
    Occlusion,
    Illumination,
    Blur,
    ScaleDrift,
}

impl PerturbationKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "occlusion" => Some(PerturbationKind::Occlusion),
            "illumination" => Some(PerturbationKind::Illumination),
            "blur" => Some(PerturbationKind::Blur),
            "scale-drift" => Some(PerturbationKind::ScaleDrift),
            _ => None,
        }
    }
}

/// One scheduled disturbance over the frame range `[start, end)`.
///
/// `magnitude` semantics per kind: occlusion — fraction of the target that
/// must be covered, in (0, 1]; illumination — global gain multiplier;
/// blur — box-filter radius in pixels; scale-drift — per-frame relative
/// growth (0.05 = +5%/frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub start: usize,
    pub end: usize,
    pub kind: PerturbationKind,
    pub magnitude: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub length: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub target_w: usize,
    pub target_h: usize,
    pub motion: MotionModel,
    pub perturbations: Vec<Perturbation>,
    pub texture_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            length: 120,
            canvas_h: 240,
            canvas_w: 240,
            target_w: 40,
            target_h: 40,
            motion: MotionModel::RandomWalk { max_step: 2.0 },
            perturbations: Vec::new(),
            texture_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.length < 1 {
            return Err(SimError::BadSpec { detail: "length must be >= 1".into() });
        }
        if self.target_w < 1 || self.target_h < 1 {
            return Err(SimError::BadSpec { detail: "target must be at least 1x1".into() });
        }
        if self.target_w > self.canvas_w || self.target_h > self.canvas_h {
            return Err(SimError::TargetTooLarge {
                target: (self.target_h, self.target_w),
                canvas: (self.canvas_h, self.canvas_w),
            });
        }
        for p in &self.perturbations {
            if p.start >= p.end || p.end > self.length {
                return Err(SimError::BadSpec {
                    detail: format!(
                        "perturbation range [{}, {}) must sit inside [0, {})",
                        p.start, p.end, self.length
                    ),
                });
            }
            let ok = match p.kind {
                PerturbationKind::Occlusion => p.magnitude > 0.0 && p.magnitude <= 1.0,
                PerturbationKind::Illumination => p.magnitude > 0.0 && p.magnitude.is_finite(),
                PerturbationKind::Blur => p.magnitude >= 1.0 && p.magnitude.is_finite(),
                PerturbationKind::ScaleDrift => p.magnitude > -0.5 && p.magnitude < 0.5,
            };
            if !ok {
                return Err(SimError::BadSpec {
                    detail: format!("magnitude {} invalid for {:?}", p.magnitude, p.kind),
                });
            }
        }
        Ok(())
    }

    /// Parses the line-oriented `key=value` format documented at module
    /// level. Unknown keys are errors; `#` lines and blanks are skipped.
    pub fn from_key_values(text: &str, origin: &Path) -> Result<Self, SimError> {
        let mut spec = SyntheticSpec::default();
        let parse_err = |line: usize, detail: String| SimError::Parse {
            path: origin.to_path_buf(),
            line,
            detail,
        };
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(parse_err(lineno, format!("expected key=value, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let uint = |v: &str| v.parse::<usize>().map_err(|e| parse_err(lineno, format!("{key}: {e}")));
            let float = |v: &str| v.parse::<f32>().map_err(|e| parse_err(lineno, format!("{key}: {e}")));
            match key {
                "length" => spec.length = uint(value)?,
                "canvas_h" => spec.canvas_h = uint(value)?,
                "canvas_w" => spec.canvas_w = uint(value)?,
                "target_w" => spec.target_w = uint(value)?,
                "target_h" => spec.target_h = uint(value)?,
                "texture_seed" => {
                    spec.texture_seed = value
                        .parse::<u64>()
                        .map_err(|e| parse_err(lineno, format!("texture_seed: {e}")))?
                }
                "motion" => {
                    spec.motion = match value {
                        "linear" => MotionModel::Linear { dx: 0.0, dy: 0.0 },
                        "random-walk" => MotionModel::RandomWalk { max_step: 2.0 },
                        other => return Err(parse_err(lineno, format!("unknown motion model {other:?}"))),
                    }
                }
                "motion_dx" | "motion_dy" => {
                    let v = float(value)?;
                    match &mut spec.motion {
                        MotionModel::Linear { dx, dy } => {
                            if key == "motion_dx" {
                                *dx = v;
                            } else {
                                *dy = v;
                            }
                        }
                        _ => return Err(parse_err(lineno, format!("{key} requires motion=linear first"))),
                    }
                }
                "motion_step" => match &mut spec.motion {
                    MotionModel::RandomWalk { max_step } => *max_step = float(value)?,
                    _ => return Err(parse_err(lineno, "motion_step requires motion=random-walk first".into())),
                },
                "perturb" => {
                    let parts: Vec<&str> = value.split(':').collect();
                    if parts.len() != 4 {
                        return Err(parse_err(lineno, format!("perturb wants kind:start:end:magnitude, got {value:?}")));
                    }
                    let kind = PerturbationKind::parse(parts[0])
                        .ok_or_else(|| parse_err(lineno, format!("unknown perturbation kind {:?}", parts[0])))?;
                    spec.perturbations.push(Perturbation {
                        start: uint(parts[1])?,
                        end: uint(parts[2])?,
                        kind,
                        magnitude: float(parts[3])?,
                    });
                }
                other => return Err(parse_err(lineno, format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Textures
// ---------------------------------------------------------------------------

/// Smooth value noise in [-1, 1]: a coarse random grid bilinearly upsampled.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let gy = (fy as usize).min(gh - 2);
        let ty = fy - gy as f32;
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let gx = (fx as usize).min(gw - 2);
            let tx = fx - gx as f32;
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * w + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// Base color modulated by two octaves of value noise; values kept inside
/// (0, 1) so downstream patch validation never trips.
fn textured_image(h: usize, w: usize, base: [f32; 3], contrast: f32, rng: &mut ChaCha8Rng) -> Image {
    let coarse = value_noise(h, w, 9, rng);
    let fine = value_noise(h, w, 3, rng);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let lum = 0.7 * coarse[y * w + x] + 0.3 * fine[y * w + x];
            let mut px = [0.0f32; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = (base[c] + contrast * lum).clamp(0.02, 0.98);
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
    ]
}

/// A color whose L1 distance from every color in `avoid` is at least `gap`.
fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[f32; 3]], gap: f32) -> [f32; 3] {
    loop {
        let c = random_color(rng);
        let ok = avoid.iter().all(|a| {
            (0..3).map(|i| (c[i] - a[i]).abs()).sum::<f32>() >= gap
        });
        if ok {
            return c;
        }
    }
}

/// Pastes `patch` opaquely with its top-left at `(corner_x, corner_y)`,
/// clipping at the canvas edges.
fn draw_patch(canvas: &mut Image, patch: &Image, corner_x: i64, corner_y: i64) {
    let (ch, cw) = (canvas.height() as i64, canvas.width() as i64);
    for py in 0..patch.height() as i64 {
        let y = corner_y + py;
        if y < 0 || y >= ch {
            continue;
        }
        for px in 0..patch.width() as i64 {
            let x = corner_x + px;
            if x < 0 || x >= cw {
                continue;
            }
            canvas.set_pixel(y as usize, x as usize, patch.pixel(py as usize, px as usize));
        }
    }
}

/// Separable mean filter with edge clamping.
fn box_blur(img: &Image, radius: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let r = radius as i64;
    let mut mid = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for k in -r..=r {
                let xx = (x as i64 + k).clamp(0, w as i64 - 1) as usize;
                let p = img.pixel(y, xx);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            let n = (2 * r + 1) as f32;
            mid.set_pixel(y, x, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for k in -r..=r {
                let yy = (y as i64 + k).clamp(0, h as i64 - 1) as usize;
                let p = mid.pixel(yy, x);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            let n = (2 * r + 1) as f32;
            out.set_pixel(y, x, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct Occluder {
    patch: Image,
    start: usize,
    end: usize,
}

/// Renders a deterministic sequence: textures come from the spec's
/// `texture_seed`, trajectories from `seed`. The same (spec, seed) always
/// yields pixel-identical frames.
pub fn gen_synthetic_sequence(spec: &SyntheticSpec, seed: u64) -> Result<Sequence, SimError> {
    spec.validate()?;
    let (len, ch, cw) = (spec.length, spec.canvas_h, spec.canvas_w);
    let (tw, th) = (spec.target_w, spec.target_h);

    // Textures first, in a fixed order, so adding perturbations never
    // changes the target's appearance.
    let mut tex_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let bg_color = random_color(&mut tex_rng);
    let background = textured_image(ch, cw, bg_color, 0.10, &mut tex_rng);
    let target_color = distinct_color(&mut tex_rng, &[bg_color], 0.55);
    let target_patch = textured_image(th, tw, target_color, 0.16, &mut tex_rng);

    // Per-frame scale factors (scale drift applies between frames).
    let mut scales = Vec::with_capacity(len);
    let mut s = 1.0f32;
    for t in 0..len {
        if t > 0 {
            for p in &spec.perturbations {
                if p.kind == PerturbationKind::ScaleDrift && t >= p.start && t < p.end {
                    s *= 1.0 + p.magnitude;
                }
            }
        }
        scales.push(s);
    }
    let sizes: Vec<(usize, usize)> = scales
        .iter()
        .map(|&s| {
            (
                ((tw as f32 * s).round() as usize).clamp(1, cw),
                ((th as f32 * s).round() as usize).clamp(1, ch),
            )
        })
        .collect();

    // Trajectory next — drawn from `seed` before any occluder parameters so
    // the path is identical with and without perturbations.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fx = cw as f32 / 2.0;
    let mut fy = ch as f32 / 2.0;
    let mut corners: Vec<(i64, i64)> = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            match spec.motion {
                MotionModel::Linear { dx, dy } => {
                    fx += dx;
                    fy += dy;
                }
                MotionModel::RandomWalk { max_step } => {
                    fx += rng.random_range(-max_step..=max_step);
                    fy += rng.random_range(-max_step..=max_step);
                }
            }
        }
        let (w, h) = sizes[t];
        fx = fx.clamp(w as f32 / 2.0, cw as f32 - w as f32 / 2.0);
        fy = fy.clamp(h as f32 / 2.0, ch as f32 - h as f32 / 2.0);
        let cx = ((fx - w as f32 / 2.0).round() as i64).clamp(0, (cw - w) as i64);
        let cy = ((fy - h as f32 / 2.0).round() as i64).clamp(0, (ch - h) as i64);
        corners.push((cx, cy));
    }

    // Occluders last: one textured patch per occlusion window.
    let mut occluders = Vec::new();
    for p in &spec.perturbations {
        if p.kind != PerturbationKind::Occlusion {
            continue;
        }
        let (w0, h0) = sizes[p.start];
        let (ow, oh) = if p.magnitude >= 1.0 {
            // Full cover: the patch overflows the box on every side so the
            // target is completely hidden even while the tracked box jitters
            // a few pixels off the true center.
            (w0 + 11, h0 + 11)
        } else {
            let a = p.magnitude.sqrt();
            ((a * w0 as f32).ceil() as usize + 1, (a * h0 as f32).ceil() as usize + 1)
        };
        let color = distinct_color(&mut tex_rng, &[target_color, bg_color], 0.55);
        let patch = textured_image(oh, ow, color, 0.14, &mut tex_rng);
        occluders.push(Occluder { patch, start: p.start, end: p.end });
    }

    let mut frames = Vec::with_capacity(len);
    let mut ground_truth = Vec::with_capacity(len);
    for t in 0..len {
        let (w, h) = sizes[t];
        let (cx, cy) = corners[t];
        let mut frame = background.clone();
        let rendered = if (w, h) == (tw, th) {
            target_patch.clone()
        } else {
            target_patch.crop_resize(tw as f32 / 2.0, th as f32 / 2.0, tw as f32, th as f32, h, w)
        };
        draw_patch(&mut frame, &rendered, cx, cy);

        let target_center = (cx as f32 + w as f32 / 2.0, cy as f32 + h as f32 / 2.0);
        for occ in &occluders {
            if t >= occ.start && t < occ.end {
                // Riding the target: centered on it, covering ≥ magnitude.
                // Past `end` the occluder is simply gone — templates
                // captured during the window lose their match immediately,
                // which is what makes selecting them afterwards costly.
                let ox = (target_center.0 - occ.patch.width() as f32 / 2.0).round() as i64;
                let oy = (target_center.1 - occ.patch.height() as f32 / 2.0).round() as i64;
                draw_patch(&mut frame, &occ.patch, ox, oy);
            }
        }

        for p in &spec.perturbations {
            if t < p.start || t >= p.end {
                continue;
            }
            match p.kind {
                PerturbationKind::Illumination => {
                    for v in frame.data_mut() {
                        *v = (*v * p.magnitude).clamp(0.0, 1.0);
                    }
                }
                PerturbationKind::Blur => {
                    frame = box_blur(&frame, p.magnitude.round() as usize);
                }
                PerturbationKind::Occlusion | PerturbationKind::ScaleDrift => {}
            }
        }

        frame.quantize_u8();
        frames.push(frame);
        ground_truth.push(BoundingBox::from_corner(cx as f32, cy as f32, w as f32, h as f32));
    }

    Sequence::new(frames, ground_truth, format!("synthetic-{seed:08x}"))
}

// ---------------------------------------------------------------------------
// Suite builders
// ---------------------------------------------------------------------------

/// Evaluation suite stressing template corruption: every sequence carries
/// two long partial occlusions placed to straddle the tracker's default
/// refresh frames (50 and 100). A short full-cover burst sits inside each
/// window around the refresh frame, so the captured template is pure
/// occluder texture; the partial window's visible target fringe keeps the
/// initial template anchored through the burst, and once the occluder
/// leaves, selecting a captured template teleports the box.
pub fn occlusion_suite_specs(count: usize, base_seed: u64) -> Vec<(SyntheticSpec, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count)
        .map(|i| {
            let s1 = rng.random_range(42..=47);
            let l1 = rng.random_range(12..=20);
            let s2 = rng.random_range(92..=97);
            let l2 = rng.random_range(12..=20);
            let motion = if i % 2 == 0 {
                MotionModel::RandomWalk { max_step: 2.0 }
            } else {
                MotionModel::Linear {
                    dx: rng.random_range(-1.2..1.2),
                    dy: rng.random_range(-1.2..1.2),
                }
            };
            let spec = SyntheticSpec {
                length: 120,
                motion,
                perturbations: vec![
                    Perturbation { start: s1, end: s1 + l1, kind: PerturbationKind::Occlusion, magnitude: 0.85 },
                    Perturbation { start: 48, end: 54, kind: PerturbationKind::Occlusion, magnitude: 1.0 },
                    Perturbation { start: s2, end: s2 + l2, kind: PerturbationKind::Occlusion, magnitude: 0.85 },
                    Perturbation { start: 98, end: 104, kind: PerturbationKind::Occlusion, magnitude: 1.0 },
                ],
                texture_seed: base_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
                ..SyntheticSpec::default()
            };
            (spec, base_seed.wrapping_add(0x51_7cc1_b727_220a_95u64.wrapping_mul(i as u64 + 1)))
        })
        .collect()
}

/// Shorter occlusion-heavy sequences for policy training; pair with a small
/// pool refresh interval so episodes sampled from them actually grow the
/// pool. Seeds are disjoint from `occlusion_suite_specs` for any
/// `base_seed`, keeping train and eval data separate.
pub fn training_suite_specs(count: usize, base_seed: u64) -> Vec<(SyntheticSpec, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0xabcd_ef01_2345_6789);
    (0..count)
        .map(|i| {
            // Episode sampling can start anywhere in the first 31 frames, so
            // the occlusion sits entirely past frame 30: no episode ever
            // initializes on an occluded target. For starts in roughly the
            // first two-thirds of that range, the episode's first pool
            // refresh (+25 frames at the training interval) lands inside the
            // occlusion and captures the occluder — the pool then holds one
            // clean and one corrupted template exactly when the occluder
            // departs, and a wrong pick there zeroes the episode's scored
            // tail.
            let s1 = rng.random_range(31..=35);
            let l1 = rng.random_range(10..=14);
            let spec = SyntheticSpec {
                length: 60,
                motion: MotionModel::RandomWalk { max_step: rng.random_range(1.0..2.5) },
                perturbations: vec![Perturbation {
                    start: s1,
                    end: s1 + l1,
                    kind: PerturbationKind::Occlusion,
                    magnitude: 0.85,
                }],
                texture_seed: base_seed ^ 0x5555_aaaa_0000_ffffu64 ^ ((i as u64 + 1) << 32),
                ..SyntheticSpec::default()
            };
            (spec, base_seed ^ 0xdead_beef_cafe_f00du64 ^ (i as u64 * 2_654_435_761 + 99))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sequence sources and episode sampling
// ---------------------------------------------------------------------------

/// Lazy access to a pool of sequences: lengths are cheap, frames load on
/// demand, so big suites never sit in memory all at once.
pub trait SequenceSource {
    fn count(&self) -> usize;
    fn frame_count(&self, index: usize) -> Result<usize, SimError>;
    fn load(&self, index: usize) -> Result<Sequence, SimError>;
}

/// Fully materialized sequences (test scale).
pub struct InMemorySource(pub Vec<Sequence>);

impl SequenceSource for InMemorySource {
    fn count(&self) -> usize {
        self.0.len()
    }

    fn frame_count(&self, index: usize) -> Result<usize, SimError> {
        Ok(self.0[index].len())
    }

    fn load(&self, index: usize) -> Result<Sequence, SimError> {
        Ok(self.0[index].clone())
    }
}

/// Sequences regenerated from (spec, seed) on every load.
pub struct SyntheticSource(pub Vec<(SyntheticSpec, u64)>);

impl SequenceSource for SyntheticSource {
    fn count(&self) -> usize {
        self.0.len()
    }

    fn frame_count(&self, index: usize) -> Result<usize, SimError> {
        Ok(self.0[index].0.length)
    }

    fn load(&self, index: usize) -> Result<Sequence, SimError> {
        let (spec, seed) = &self.0[index];
        gen_synthetic_sequence(spec, *seed)
    }
}

/// Sequence directories on disk in the benchmark layout.
pub struct DiskSource(pub Vec<PathBuf>);

impl DiskSource {
    /// Scans `root` for subdirectories holding a `groundtruth_rect.txt`.
    pub fn scan(root: &Path) -> Result<Self, SimError> {
        let entries = fs::read_dir(root)
            .map_err(|e| SimError::Io { path: root.to_path_buf(), detail: e.to_string() })?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("groundtruth_rect.txt").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(SimError::Io {
                path: root.to_path_buf(),
                detail: "no sequence directories (need <name>/groundtruth_rect.txt)".into(),
            });
        }
        Ok(DiskSource(dirs))
    }
}

impl SequenceSource for DiskSource {
    fn count(&self) -> usize {
        self.0.len()
    }

    fn frame_count(&self, index: usize) -> Result<usize, SimError> {
        let path = self.0[index].join("groundtruth_rect.txt");
        let text = fs::read_to_string(&path)
            .map_err(|e| SimError::Io { path: path.clone(), detail: e.to_string() })?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
    }

    fn load(&self, index: usize) -> Result<Sequence, SimError> {
        load_otb_sequence(&self.0[index])
    }
}

/// A sampled training episode: which sequence, where it starts, how long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSlice {
    pub sequence: usize,
    pub start: usize,
    pub length: usize,
}

/// Uniformly samples a sequence (among those long enough), a start, and a
/// length clamped to `[MIN_EPISODE, min(MAX_EPISODE, remaining)]`.
pub fn sample_episode<R: Rng>(source: &dyn SequenceSource, rng: &mut R) -> Result<EpisodeSlice, SimError> {
    let mut eligible = Vec::new();
    for i in 0..source.count() {
        let n = source.frame_count(i)?;
        if n >= MIN_EPISODE {
            eligible.push((i, n));
        }
    }
    if eligible.is_empty() {
        return Err(SimError::NoEligibleSequence { min_len: MIN_EPISODE });
    }
    let (sequence, total) = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(0..=total - MIN_EPISODE);
    let max_len = (total - start).min(MAX_EPISODE);
    let length = rng.random_range(MIN_EPISODE..=max_len);
    Ok(EpisodeSlice { sequence, start, length })
}

// ---------------------------------------------------------------------------
// Matching-pair generation
// ---------------------------------------------------------------------------

/// Side of the patch planted in the 120×120 pair canvas. Half the canvas,
/// matching the tracker's crop geometry (target side = half the search
/// side), so pretraining and tracking see the same scale.
const PAIR_PATCH_SIDE: usize = 60;
/// Planted offsets are uniform integers in [-30, 30]² — the patch always
/// stays fully inside the canvas.
const PAIR_MAX_OFFSET: i32 = 30;

/// Infinite, seeded stream of matching-pretraining pairs. Each item plants
/// a textured patch at a uniform offset in a cluttered canvas (textured
/// background plus one differently colored distractor patch), with the
/// patch itself (resized to 48×48) as the template and a Gaussian label at
/// the true offset as the target.
pub struct MatchPairGen {
    rng: ChaCha8Rng,
}

impl MatchPairGen {
    pub fn new(seed: u64) -> Self {
        MatchPairGen { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Iterator for MatchPairGen {
    type Item = MatchTrainingPair;

    fn next(&mut self) -> Option<MatchTrainingPair> {
        let rng = &mut self.rng;
        let bg_color = random_color(rng);
        let mut canvas = textured_image(SEARCH_SIDE, SEARCH_SIDE, bg_color, 0.10, rng);
        let target_color = distinct_color(rng, &[bg_color], 0.45);
        let target = textured_image(PAIR_PATCH_SIDE, PAIR_PATCH_SIDE, target_color, 0.16, rng);
        let distractor_color = distinct_color(rng, &[target_color], 0.45);
        let distractor = textured_image(PAIR_PATCH_SIDE, PAIR_PATCH_SIDE, distractor_color, 0.16, rng);

        let dx = rng.random_range(-PAIR_MAX_OFFSET..=PAIR_MAX_OFFSET);
        let dy = rng.random_range(-PAIR_MAX_OFFSET..=PAIR_MAX_OFFSET);
        let half = SEARCH_SIDE as i32 / 2;
        let ps = PAIR_PATCH_SIDE as i32;

        // Distractor on the far side of one axis: one full patch side plus a
        // gap, so it never overlaps the target but usually stays in view.
        let sep = ps + 1 + rng.random_range(0..12);
        let jitter = rng.random_range(-12..=12);
        let (dcx, dcy) = if rng.random_bool(0.5) {
            (half + dx + if dx <= 0 { sep } else { -sep }, half + dy + jitter)
        } else {
            (half + dx + jitter, half + dy + if dy <= 0 { sep } else { -sep })
        };
        draw_patch(&mut canvas, &distractor, (dcx - ps / 2) as i64, (dcy - ps / 2) as i64);
        draw_patch(
            &mut canvas,
            &target,
            (half + dx - ps / 2) as i64,
            (half + dy - ps / 2) as i64,
        );

        let template_img = target.crop_resize(
            PAIR_PATCH_SIDE as f32 / 2.0,
            PAIR_PATCH_SIDE as f32 / 2.0,
            PAIR_PATCH_SIDE as f32,
            PAIR_PATCH_SIDE as f32,
            TEMPLATE_SIDE,
            TEMPLATE_SIDE,
        );
        let template = TemplatePatch::from_image(&template_img).expect("textured patch is valid");
        let search = SearchPatch::from_image(&canvas, (half as f32, half as f32), SEARCH_SIDE as f32)
            .expect("canvas has search dimensions");
        let (row, col) = displacement_to_cell(dx as f32, dy as f32, SEARCH_SIDE as f32);
        let pair = MatchTrainingPair::new(template, search, (row - MAP_CENTER, col - MAP_CENTER), TARGET_SIGMA)
            .expect("offsets stay inside the map");
        Some(pair)
    }
}

/// Materializes `n` pairs; prefer iterating [`MatchPairGen`] for big runs.
pub fn gen_matching_pairs(n: usize, seed: u64) -> Vec<MatchTrainingPair> {
    MatchPairGen::new(seed).take(n).collect()
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

const GT_FILE: &str = "groundtruth_rect.txt";

fn format_gt_line(b: &BoundingBox) -> String {
    let (x, y) = b.corner();
    format!("{},{},{},{}", x, y, b.w, b.h)
}

fn parse_gt_line(line: &str) -> Result<BoundingBox, String> {
    let parts: Vec<&str> = line.split(|c| c == ',' || c == '\t').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma- or tab-separated fields, got {}", parts.len()));
    }
    let mut vals = [0.0f32; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.parse::<f32>().map_err(|e| format!("{p:?}: {e}"))?;
    }
    let [x, y, w, h] = vals;
    if !(w > 0.0 && h > 0.0) {
        return Err(format!("box size {w}x{h} must be positive"));
    }
    Ok(BoundingBox::from_corner(x, y, w, h))
}

/// Loads `<dir>/groundtruth_rect.txt` (corner convention, comma or tab
/// separated) plus the numbered frames under `<dir>/img/`.
pub fn load_otb_sequence(dir: &Path) -> Result<Sequence, SimError> {
    let gt_path = dir.join(GT_FILE);
    let text = fs::read_to_string(&gt_path)
        .map_err(|e| SimError::Io { path: gt_path.clone(), detail: e.to_string() })?;
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let b = parse_gt_line(line).map_err(|detail| SimError::Parse {
            path: gt_path.clone(),
            line: idx + 1,
            detail,
        })?;
        boxes.push(b);
    }
    if boxes.is_empty() {
        return Err(SimError::Parse { path: gt_path, line: 0, detail: "no annotation lines".into() });
    }

    let img_dir = dir.join("img");
    let entries = fs::read_dir(&img_dir)
        .map_err(|e| SimError::Io { path: img_dir.clone(), detail: e.to_string() })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.len() != boxes.len() {
        return Err(SimError::CountMismatch {
            path: dir.to_path_buf(),
            frames: files.len(),
            annotations: boxes.len(),
        });
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        frames.push(Image::load(f)?);
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Sequence::new(frames, boxes, name)
}

/// Writes `seq` under `root/<seq.name>/` in the layout `load_otb_sequence`
/// reads: corner-convention annotations plus 1-indexed PNG frames. Returns
/// the sequence directory.
pub fn save_otb_sequence(seq: &Sequence, root: &Path) -> Result<PathBuf, SimError> {
    let dir = root.join(&seq.name);
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir)
        .map_err(|e| SimError::Io { path: img_dir.clone(), detail: e.to_string() })?;
    let mut text = String::new();
    for b in &seq.ground_truth {
        text.push_str(&format_gt_line(b));
        text.push('\n');
    }
    let gt_path = dir.join(GT_FILE);
    fs::write(&gt_path, text).map_err(|e| SimError::Io { path: gt_path, detail: e.to_string() })?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save_png(&img_dir.join(format!("{:04}.png", i + 1)))?;
    }
    Ok(dir)
}
