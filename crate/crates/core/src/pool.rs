//! Bounded pool of appearance templates, refreshed on a fixed frame
//! interval. The pool deliberately applies no quality gate to incoming
//! patches — a corrupted crop (occluder, drifted box) enters like any other,
//! and rejecting it at selection time is the policy network's job.

use crate::matching::TemplatePatch;
use std::fmt;

#[derive(Debug)]
pub enum PoolError {
    BadConfig { detail: String },
    /// `maybe_update` was called with a frame index that does not strictly
    /// increase.
    NonMonotoneFrame { frame: u64, last: u64 },
}

impl fmt::Display for PoolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolError::BadConfig { detail } => write!(f, "bad pool config: {detail}"),
            PoolError::NonMonotoneFrame { frame, last } => {
                write!(f, "frame index {frame} does not increase past {last}")
            }
        }
    }
}

impl std::error::Error for PoolError {}

/// One pooled template and when it was acquired.
#[derive(Debug, Clone)]
pub struct Template {
    pub patch: TemplatePatch,
    pub acquired_frame: u64,
    pub is_initial: bool,
}

/// Ordered, bounded template set. Index positions double as the policy's
/// action space, so order is stable: ascending acquisition frame.
#[derive(Debug, Clone)]
pub struct TemplatePool {
    templates: Vec<Template>,
    capacity: usize,
    interval: u64,
    retain_initial: bool,
    last_frame: Option<u64>,
}

impl TemplatePool {
    pub const DEFAULT_CAPACITY: usize = 4;
    pub const DEFAULT_INTERVAL: u64 = 50;

    /// Pool holding only the initial template, acquired at frame 0.
    pub fn new(
        initial: TemplatePatch,
        capacity: usize,
        interval: u64,
        retain_initial: bool,
    ) -> Result<Self, PoolError> {
        if capacity < 1 {
            return Err(PoolError::BadConfig { detail: "capacity must be >= 1".into() });
        }
        if interval < 1 {
            return Err(PoolError::BadConfig { detail: "update interval must be >= 1".into() });
        }
        Ok(TemplatePool {
            templates: vec![Template { patch: initial, acquired_frame: 0, is_initial: true }],
            capacity,
            interval,
            retain_initial,
            last_frame: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a pool always holds at least the initial template
    }

    /// Templates in ascending acquisition order; index i is action i.
    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn patches(&self) -> Vec<&TemplatePatch> {
        self.templates.iter().map(|t| &t.patch).collect()
    }

    /// Admits `patch` iff `frame_idx` is a positive multiple of the update
    /// interval, evicting the oldest template (oldest non-initial when the
    /// initial is retained) once capacity is exceeded. Returns whether the
    /// pool changed. Frame indices must strictly increase across calls.
    pub fn maybe_update(&mut self, frame_idx: u64, patch: TemplatePatch) -> Result<bool, PoolError> {
        if let Some(last) = self.last_frame {
            if frame_idx <= last {
                return Err(PoolError::NonMonotoneFrame { frame: frame_idx, last });
            }
        }
        self.last_frame = Some(frame_idx);
        if frame_idx == 0 || frame_idx % self.interval != 0 {
            return Ok(false);
        }
        self.templates.push(Template { patch, acquired_frame: frame_idx, is_initial: false });
        while self.templates.len() > self.capacity {
            let victim = if self.retain_initial {
                self.templates
                    .iter()
                    .position(|t| !t.is_initial)
                    .expect("a pool over capacity > 0 holds a non-initial template")
            } else {
                0
            };
            self.templates.remove(victim);
        }
        Ok(true)
    }
}
