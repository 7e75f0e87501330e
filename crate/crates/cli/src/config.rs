//! Line-oriented `key=value` run configuration.
//!
//! One file drives every subcommand: training hyper-parameters, tracker
//! behavior, matcher pretraining, and harness knobs all share a flat
//! namespace. Lines starting with `#` and blank lines are skipped; every
//! other line must be `key=value` with a known key, and a key may appear at
//! most once. All state flows through flags and this file — the binary
//! reads no environment variables.

use anyhow::{bail, Context, Result};
use retrack_core::matching::MatchTrainConfig;
use retrack_core::trainer::{ReplayPlan, TrainConfig};
use retrack_core::TrackerConfig;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub matcher: MatchTrainConfig,
    /// Pair budget for matcher pretraining (the stream is capped here even
    /// if `steps * batch_size` asks for more).
    pub pairs: usize,
    /// Synthetic-suite size used when no sequence directory is given.
    pub suite_count: usize,
    /// Template refresh intervals visited by `sweep`.
    pub intervals: Vec<u64>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            matcher: MatchTrainConfig::default(),
            pairs: 32_000,
            suite_count: 8,
            intervals: vec![20, 50, 100, 200],
        }
    }
}

impl AppConfig {
    /// Parses a config file over the defaults. `None` means pure defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = AppConfig::default();
        let Some(path) = path else { return Ok(cfg) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{}:{}", path.display(), idx + 1);
            let Some((key, value)) = line.split_once('=') else {
                bail!("{at}: expected key=value, got {line:?}");
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                bail!("{at}: duplicate key {key:?}");
            }
            seen.push(key.to_string());
            cfg.apply(key, value).with_context(|| format!("{at}: key {key:?}"))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // -- policy training ------------------------------------------
            "learning_rate" => self.train.learning_rate = parse(value)?,
            "discount" => self.train.discount = parse(value)?,
            "episodes" => self.train.episodes = parse(value)?,
            "failure_iou" => self.train.failure_iou = parse(value)?,
            "outcome_window" => self.train.outcome_window = parse(value)?,
            "replay_capacity" => self.train.replay_capacity = parse(value)?,
            "checkpoint_every" => {
                let n: usize = parse(value)?;
                self.train.checkpoint_every = if n == 0 { None } else { Some(n) };
            }
            "replay" => {
                self.train.replay = if value == "twice-per-frame" {
                    ReplayPlan::TwicePerFrame
                } else if let Some(n) = value.strip_prefix("fixed:") {
                    ReplayPlan::Fixed(parse(n)?)
                } else {
                    bail!("expected twice-per-frame or fixed:<n>, got {value:?}")
                };
            }
            // -- shared by training and tracking --------------------------
            "pool_capacity" => {
                self.train.pool_capacity = parse(value)?;
                self.tracker.pool_capacity = self.train.pool_capacity;
            }
            "update_interval" => {
                self.train.update_interval = parse(value)?;
                self.tracker.update_interval = self.train.update_interval;
            }
            // -- tracker behavior ------------------------------------------
            "retain_initial" => self.tracker.retain_initial = parse_bool(value)?,
            "scale_step" => self.tracker.scale_step = parse(value)?,
            "shift_frac" => self.tracker.shift_frac = parse(value)?,
            "updates_enabled" => self.tracker.updates_enabled = parse_bool(value)?,
            // -- matcher pretraining ---------------------------------------
            "pairs" => self.pairs = parse(value)?,
            "batch_size" => self.matcher.batch_size = parse(value)?,
            "steps" => self.matcher.steps = parse(value)?,
            "matcher_lr" => self.matcher.learning_rate = parse(value)?,
            // -- harness ---------------------------------------------------
            "suite_count" => self.suite_count = parse(value)?,
            "intervals" => {
                let parsed: Result<Vec<u64>> =
                    value.split(',').map(|v| parse::<u64>(v.trim())).collect();
                let parsed = parsed?;
                if parsed.is_empty() || parsed.contains(&0) {
                    bail!("intervals must be a non-empty list of positive integers");
                }
                self.intervals = parsed;
            }
            _ => bail!("unknown key"),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .parse::<T>()
        .with_context(|| format!("cannot parse value {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("expected a boolean, got {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_survive_an_absent_file() {
        let cfg = AppConfig::load(None).unwrap();
        assert_eq!(cfg.train.episodes, 2000);
        assert_eq!(cfg.tracker.pool_capacity, cfg.train.pool_capacity);
        assert_eq!(cfg.intervals, vec![20, 50, 100, 200]);
    }

    #[test]
    fn every_key_lands_in_its_field() {
        let f = write_cfg(
            "# a comment\n\
             learning_rate=0.005\n\
             discount=0.9\n\
             episodes=12\n\
             pool_capacity=3\n\
             update_interval=25\n\
             failure_iou=0.3\n\
             outcome_window=10\n\
             replay=fixed:40\n\
             replay_capacity=100\n\
             checkpoint_every=6\n\
             retain_initial=false\n\
             scale_step=1.02\n\
             shift_frac=0.15\n\
             updates_enabled=true\n\
             pairs=640\n\
             batch_size=16\n\
             steps=40\n\
             matcher_lr=0.0002\n\
             suite_count=5\n\
             intervals=10, 30\n",
        );
        let cfg = AppConfig::load(Some(f.path())).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.005);
        assert_eq!(cfg.train.discount, 0.9);
        assert_eq!(cfg.train.episodes, 12);
        assert_eq!(cfg.train.pool_capacity, 3);
        assert_eq!(cfg.tracker.pool_capacity, 3);
        assert_eq!(cfg.train.update_interval, 25);
        assert_eq!(cfg.tracker.update_interval, 25);
        assert_eq!(cfg.train.failure_iou, 0.3);
        assert_eq!(cfg.train.outcome_window, 10);
        assert_eq!(cfg.train.replay, ReplayPlan::Fixed(40));
        assert_eq!(cfg.train.replay_capacity, 100);
        assert_eq!(cfg.train.checkpoint_every, Some(6));
        assert!(!cfg.tracker.retain_initial);
        assert_eq!(cfg.tracker.scale_step, 1.02);
        assert_eq!(cfg.tracker.shift_frac, 0.15);
        assert!(cfg.tracker.updates_enabled);
        assert_eq!(cfg.pairs, 640);
        assert_eq!(cfg.matcher.batch_size, 16);
        assert_eq!(cfg.matcher.steps, 40);
        assert_eq!(cfg.matcher.learning_rate, 0.0002);
        assert_eq!(cfg.suite_count, 5);
        assert_eq!(cfg.intervals, vec![10, 30]);
    }

    #[test]
    fn zero_checkpoint_interval_disables_checkpointing() {
        let f = write_cfg("checkpoint_every=0\n");
        let cfg = AppConfig::load(Some(f.path())).unwrap();
        assert_eq!(cfg.train.checkpoint_every, None);
    }

    #[test]
    fn bad_lines_are_rejected_with_their_location() {
        for (text, needle) in [
            ("mystery=1\n", "unknown key"),
            ("episodes=ten\n", "cannot parse"),
            ("episodes=1\nepisodes=2\n", "duplicate"),
            ("no equals sign\n", "key=value"),
            ("replay=sometimes\n", "twice-per-frame"),
            ("intervals=0\n", "positive"),
            ("retain_initial=maybe\n", "boolean"),
        ] {
            let f = write_cfg(text);
            let err = format!("{:#}", AppConfig::load(Some(f.path())).unwrap_err());
            assert!(err.contains(needle), "{text:?} -> {err}");
        }
    }
}
