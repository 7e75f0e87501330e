//! `retrack` — command-line driver for the template-selection tracker:
//! matcher pretraining, policy training, synthetic data generation,
//! tracking, and benchmark evaluation (OPE/TRE/SRE, baselines, interval
//! sweeps). All state arrives via flags and the `--config` file; no
//! environment variables are read. Exit code is 0 on success and nonzero
//! with a message on any error.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::AppConfig;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retrack_core::eval::{
    baseline_modes, emit_report, iou_series, run_baselines, run_interval_sweep, run_protocol,
    Protocol,
};
use retrack_core::matching::{localization_hit_rate, train_matching, MatchingNet};
use retrack_core::nn::store::{load_tensors, save_tensors};
use retrack_core::policy::PolicyNet;
use retrack_core::sim::{
    gen_matching_pairs, gen_synthetic_sequence, occlusion_suite_specs, save_otb_sequence,
    training_suite_specs, DiskSource, MatchPairGen, SequenceSource, SyntheticSource,
    SyntheticSpec,
};
use retrack_core::tracker::{track_sequence, SelectionMode};
use retrack_core::trainer::train_policy;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "retrack",
    about = "Train, run, and benchmark a template-selection visual tracker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the matching network on streamed synthetic pairs
    PretrainMatcher {
        /// Output directory for weights and the loss log
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// key=value run configuration
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the template-selection policy against a frozen matcher
    TrainPolicy {
        /// Matcher weights (a matcher-only file or a full tracker bundle)
        #[arg(long)]
        weights: PathBuf,
        /// Sequence directory in benchmark layout; synthetic episodes are
        /// generated when omitted
        #[arg(long)]
        seq_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic sequences in on-disk benchmark layout
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence spec (key=value); may include count=<n> for several
        /// sequences from the same spec
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Track every sequence in a directory and write predicted boxes
    Track {
        /// Tracker bundle holding matcher and policy weights
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Template selection: rl, ml, rand, or single
        #[arg(long, default_value = "rl")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a benchmark protocol and emit its report files
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation protocol: ope, tre, or sre
        #[arg(long, default_value = "ope")]
        protocol: String,
        #[arg(long, default_value = "rl")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a range of template refresh intervals
    Sweep {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rl")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare the selection-mode baselines under one protocol
    Baselines {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ope")]
        protocol: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PretrainMatcher { out, seed, config } => {
            cmd_pretrain_matcher(&out, seed, config.as_deref())
        }
        Command::TrainPolicy { weights, seq_dir, out, seed, config } => {
            cmd_train_policy(&weights, seq_dir.as_deref(), &out, seed, config.as_deref())
        }
        Command::GenData { out, seed, config } => cmd_gen_data(&out, seed, config.as_deref()),
        Command::Track { weights, seq_dir, out, mode, seed, config } => {
            cmd_track(&weights, &seq_dir, &out, &mode, seed, config.as_deref())
        }
        Command::Eval { weights, seq_dir, out, protocol, mode, seed, config } => cmd_eval(
            &weights,
            seq_dir.as_deref(),
            &out,
            &protocol,
            &mode,
            seed,
            config.as_deref(),
        ),
        Command::Sweep { weights, seq_dir, out, mode, seed, config } => {
            cmd_sweep(&weights, seq_dir.as_deref(), &out, &mode, seed, config.as_deref())
        }
        Command::Baselines { weights, seq_dir, out, protocol, seed, config } => cmd_baselines(
            &weights,
            seq_dir.as_deref(),
            &out,
            &protocol,
            seed,
            config.as_deref(),
        ),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Seed offsets so one --seed drives several independent streams.
const SALT_PAIRS: u64 = 0x70ae_15f3_9e3c_55d1;
const SALT_POLICY_INIT: u64 = 0x243f_6a88_85a3_08d3;
const SALT_HOLDOUT: u64 = 0x1357_9bdf_2468_ace0;

fn parse_mode(flag: &str) -> Result<SelectionMode> {
    SelectionMode::from_flag(flag)
        .with_context(|| format!("unknown mode {flag:?} (expected rl, ml, rand, or single)"))
}

fn parse_protocol(flag: &str) -> Result<Protocol> {
    Ok(Protocol::from_flag(flag)?)
}

/// One weights file carries the whole tracker; the per-network prefixes in
/// the tensor names keep the two halves apart.
fn save_bundle(path: &Path, matcher: &MatchingNet<f32>, policy: &PolicyNet<f32>) -> Result<()> {
    let mut entries = matcher.weight_entries();
    entries.extend(policy.weight_entries());
    save_tensors(path, &entries).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_bundle(path: &Path) -> Result<(MatchingNet<f32>, PolicyNet<f32>)> {
    let mut entries =
        load_tensors(path).with_context(|| format!("reading {}", path.display()))?;
    let matcher = MatchingNet::from_entries(&mut entries)
        .with_context(|| format!("matcher weights in {}", path.display()))?;
    let policy = PolicyNet::from_entries(&mut entries)
        .with_context(|| format!("policy weights in {}", path.display()))?;
    Ok((matcher, policy))
}

/// Sequences from disk when a directory is given, otherwise the seeded
/// synthetic suite (lazily generated, so only one sequence is ever held in
/// memory at a time).
fn sequence_source(
    seq_dir: Option<&Path>,
    suite_count: usize,
    seed: u64,
) -> Result<Box<dyn SequenceSource>> {
    match seq_dir {
        Some(dir) => {
            let src = DiskSource::scan(dir)
                .with_context(|| format!("scanning {}", dir.display()))?;
            if src.0.is_empty() {
                bail!("no sequences under {} (expected <name>/groundtruth_rect.txt)", dir.display());
            }
            println!("sequences: {} from {}", src.0.len(), dir.display());
            Ok(Box::new(src))
        }
        None => {
            println!("sequences: synthetic occlusion suite of {suite_count} (seed {seed})");
            Ok(Box::new(SyntheticSource(occlusion_suite_specs(suite_count, seed))))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_pretrain_matcher(out: &Path, seed: u64, config: Option<&Path>) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    ensure_dir(out)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MatchingNet::<f32>::new(&mut init_rng);
    let stream = MatchPairGen::new(seed ^ SALT_PAIRS).take(cfg.pairs);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    println!(
        "pretraining matcher: up to {} pairs, {} steps x batch {}, lr {}",
        cfg.pairs, cfg.matcher.steps, cfg.matcher.batch_size, cfg.matcher.learning_rate
    );
    let log = train_matching(&mut net, stream, &cfg.matcher, &mut train_rng)?;

    let holdout = gen_matching_pairs(500, seed ^ SALT_HOLDOUT);
    let hit = localization_hit_rate(&net, holdout, 2);

    let weights = out.join("matcher.rdtw");
    net.save(&weights)?;
    let mut table = String::from("step\tloss\n");
    for (i, loss) in log.step_losses.iter().enumerate() {
        table.push_str(&format!("{i}\t{loss:.6}\n"));
    }
    let log_path = out.join("pretrain_log.tsv");
    fs::write(&log_path, table)?;

    println!(
        "pairs seen: {}; first/last step loss: {:.4} -> {:.4}",
        log.pairs_seen,
        log.step_losses.first().copied().unwrap_or(f64::NAN),
        log.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("held-out localization within 2 cells: {:.1}%", hit * 100.0);
    println!("wrote {} and {}", weights.display(), log_path.display());
    Ok(())
}

fn cmd_train_policy(
    weights: &Path,
    seq_dir: Option<&Path>,
    out: &Path,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    ensure_dir(out)?;

    let matcher = MatchingNet::<f32>::load(weights)
        .with_context(|| format!("matcher weights {}", weights.display()))?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_POLICY_INIT);
    let mut policy = PolicyNet::<f32>::new(&mut policy_rng);

    let source: Box<dyn SequenceSource> = match seq_dir {
        Some(dir) => {
            let src = DiskSource::scan(dir)
                .with_context(|| format!("scanning {}", dir.display()))?;
            println!("training episodes drawn from {} sequences in {}", src.0.len(), dir.display());
            Box::new(src)
        }
        None => {
            println!("training episodes drawn from a synthetic suite of {}", cfg.suite_count);
            Box::new(SyntheticSource(training_suite_specs(cfg.suite_count, seed)))
        }
    };

    println!(
        "training policy: {} episodes, lr {}, discount {}, pool {} / refresh every {}",
        cfg.train.episodes,
        cfg.train.learning_rate,
        cfg.train.discount,
        cfg.train.pool_capacity,
        cfg.train.update_interval
    );
    let report = train_policy(&matcher, &mut policy, source.as_ref(), &cfg.train, seed, Some(out))?;

    let bundle = out.join("tracker.rdtw");
    save_bundle(&bundle, &matcher, &policy)?;
    let log_path = out.join("train_log.tsv");
    fs::write(&log_path, report.log_text())?;

    if let Some(last) = report.logs.last() {
        println!(
            "episodes: {}; final cumulative success rate {:.3}; replay buffers {}/{}",
            report.logs.len(),
            last.cumulative_success_rate,
            last.success_buffer,
            last.failure_buffer
        );
    } else {
        println!("episodes: 0 (policy saved at its seeded initialization)");
    }
    println!("wrote {} and {}", bundle.display(), log_path.display());
    Ok(())
}

fn cmd_gen_data(out: &Path, seed: u64, config: Option<&Path>) -> Result<()> {
    // The config is a sequence spec plus the harness key `count`; the
    // count lines are blanked to comments (preserving line numbers) before
    // the spec parser sees the text.
    let (spec, count) = match config {
        None => (SyntheticSpec::default(), 1usize),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            let mut count = 1usize;
            let mut filtered = String::new();
            for (idx, line) in text.lines().enumerate() {
                let is_count = line
                    .split_once('=')
                    .map(|(k, _)| k.trim() == "count")
                    .unwrap_or(false);
                if is_count {
                    let value = line.split_once('=').unwrap().1.trim();
                    count = value.parse().with_context(|| {
                        format!("{}:{}: bad count {value:?}", path.display(), idx + 1)
                    })?;
                    filtered.push_str("# (count handled by the harness)");
                } else {
                    filtered.push_str(line);
                }
                filtered.push('\n');
            }
            if count == 0 {
                bail!("count must be >= 1");
            }
            (SyntheticSpec::from_key_values(&filtered, path)?, count)
        }
    };
    ensure_dir(out)?;

    for i in 0..count as u64 {
        let mut spec_i = spec.clone();
        spec_i.texture_seed = spec.texture_seed.wrapping_add(i);
        let seq = gen_synthetic_sequence(&spec_i, seed.wrapping_add(i))?;
        let dir = save_otb_sequence(&seq, out)?;
        println!("wrote {} ({} frames)", dir.display(), seq.len());
    }
    Ok(())
}

fn cmd_track(
    weights: &Path,
    seq_dir: &Path,
    out: &Path,
    mode: &str,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    let mode = parse_mode(mode)?;
    let (matcher, policy) = load_bundle(weights)?;
    let disk = DiskSource::scan(seq_dir)
        .with_context(|| format!("scanning {}", seq_dir.display()))?;
    if disk.0.is_empty() {
        bail!("no sequences under {}", seq_dir.display());
    }
    ensure_dir(out)?;

    for i in 0..disk.count() {
        let seq = disk.load(i)?;
        let boxes = track_sequence(
            &matcher,
            &policy,
            &seq.frames,
            seq.ground_truth[0],
            mode,
            &cfg.tracker,
            seed,
        )?;
        let ious = iou_series(&boxes, &seq.ground_truth)?;
        let mean_iou = ious.iter().map(|&v| v as f64).sum::<f64>() / ious.len() as f64;

        let mut table = String::from("frame\tx\ty\tw\th\tiou\n");
        for (f, (b, iou)) in boxes.iter().zip(&ious).enumerate() {
            let (x, y) = b.corner();
            table.push_str(&format!(
                "{f}\t{x:.6}\t{y:.6}\t{:.6}\t{:.6}\t{iou:.6}\n",
                b.w, b.h
            ));
        }
        let path = out.join(format!("{}_{}_s{}_boxes.tsv", seq.name, mode.flag_name(), seed));
        fs::write(&path, table)?;
        println!(
            "{}: {} frames, mean IoU {:.3} -> {}",
            seq.name,
            seq.len(),
            mean_iou,
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    weights: &Path,
    seq_dir: Option<&Path>,
    out: &Path,
    protocol: &str,
    mode: &str,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    let protocol = parse_protocol(protocol)?;
    let mode = parse_mode(mode)?;
    let (matcher, policy) = load_bundle(weights)?;
    let source = sequence_source(seq_dir, cfg.suite_count, seed)?;

    let run = run_protocol(&matcher, &policy, source.as_ref(), protocol, mode, &cfg.tracker, seed)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let files = emit_report(&run, out)?;

    println!(
        "{} / {}: aggregate AUC {:.4} over {} runs",
        protocol.flag_name(),
        mode.flag_name(),
        run.aggregate_auc,
        run.runs.len()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_sweep(
    weights: &Path,
    seq_dir: Option<&Path>,
    out: &Path,
    mode: &str,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    let mode = parse_mode(mode)?;
    let (matcher, policy) = load_bundle(weights)?;
    let source = sequence_source(seq_dir, cfg.suite_count, seed)?;
    ensure_dir(out)?;

    let rows = run_interval_sweep(
        &matcher,
        &policy,
        source.as_ref(),
        mode,
        &cfg.tracker,
        &cfg.intervals,
        seed,
    )?;

    let mut table = String::from("interval\tauc\n");
    for row in &rows {
        table.push_str(&format!("{}\t{:.6}\n", row.interval, row.auc));
        println!("refresh every {:>4} frames -> AUC {:.4}", row.interval, row.auc);
    }
    let path = out.join(format!("sweep_{}_s{}.tsv", mode.flag_name(), seed));
    fs::write(&path, table)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_baselines(
    weights: &Path,
    seq_dir: Option<&Path>,
    out: &Path,
    protocol: &str,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    let protocol = parse_protocol(protocol)?;
    let (matcher, policy) = load_bundle(weights)?;
    let source = sequence_source(seq_dir, cfg.suite_count, seed)?;
    ensure_dir(out)?;

    let runs = run_baselines(
        &matcher,
        &policy,
        source.as_ref(),
        protocol,
        &baseline_modes(),
        &cfg.tracker,
        seed,
    )?;

    let mut table = String::from("mode\taggregate_auc\truns\n");
    for run in &runs {
        emit_report(run, out)?;
        table.push_str(&format!(
            "{}\t{:.6}\t{}\n",
            run.mode.flag_name(),
            run.aggregate_auc,
            run.runs.len()
        ));
        println!("mode {:>6}: AUC {:.4}", run.mode.flag_name(), run.aggregate_auc);
    }
    let path = out.join(format!("baselines_{}_s{}.tsv", protocol.flag_name(), seed));
    fs::write(&path, table)?;
    println!("wrote {}", path.display());
    Ok(())
}
