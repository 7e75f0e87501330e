//! End-to-end exercise of the binary: generate data, pretrain a tiny
//! matcher, train a tiny policy on the generated sequences, track, and
//! evaluate — asserting exit codes, produced files, and byte-identical
//! re-evaluation. Budgets are minuscule; competence is the acceptance
//! suite's job, plumbing is this one's.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn retrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn the_full_pipeline_runs_and_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();

    // -- gen-data: two small sequences in benchmark layout ----------------
    let spec = root.join("spec.cfg");
    write(
        &spec,
        "length=30\ncanvas_h=100\ncanvas_w=100\ntarget_w=24\ntarget_h=24\n\
         motion=random-walk\nmotion_step=1.5\ncount=2\n",
    );
    let data = root.join("data");
    let out = retrack(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--config",
        spec.to_str().unwrap(),
    ]);
    assert_ok(&out, "gen-data");
    let seq_dirs: Vec<_> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(seq_dirs.len(), 2, "count=2 produces two sequence directories");
    for d in &seq_dirs {
        assert!(d.join("groundtruth_rect.txt").is_file());
        assert!(d.join("img").join("0001.png").is_file());
    }

    // -- pretrain-matcher with a tiny budget -------------------------------
    let run_cfg = root.join("run.cfg");
    write(
        &run_cfg,
        "pairs=96\nbatch_size=8\nsteps=12\nepisodes=2\npool_capacity=2\nupdate_interval=10\n",
    );
    let train_dir = root.join("train");
    let out = retrack(&[
        "pretrain-matcher",
        "--out",
        train_dir.to_str().unwrap(),
        "--seed",
        "1",
        "--config",
        run_cfg.to_str().unwrap(),
    ]);
    assert_ok(&out, "pretrain-matcher");
    let matcher = train_dir.join("matcher.rdtw");
    assert!(matcher.is_file());
    let log = fs::read_to_string(train_dir.join("pretrain_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 13, "header plus one line per step");

    // -- train-policy on the generated sequences ---------------------------
    let out = retrack(&[
        "train-policy",
        "--weights",
        matcher.to_str().unwrap(),
        "--seq-dir",
        data.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
        "--seed",
        "2",
        "--config",
        run_cfg.to_str().unwrap(),
    ]);
    assert_ok(&out, "train-policy");
    let bundle = train_dir.join("tracker.rdtw");
    assert!(bundle.is_file());
    let log = fs::read_to_string(train_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus one line per episode");
    assert!(log.starts_with("episode\t"));

    // -- track ---------------------------------------------------------------
    let tracks = root.join("tracks");
    let out = retrack(&[
        "track",
        "--weights",
        bundle.to_str().unwrap(),
        "--seq-dir",
        data.to_str().unwrap(),
        "--out",
        tracks.to_str().unwrap(),
        "--mode",
        "rl",
    ]);
    assert_ok(&out, "track");
    let box_files: Vec<_> = fs::read_dir(&tracks).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(box_files.len(), 2);
    let boxes = fs::read_to_string(&box_files[0]).unwrap();
    assert_eq!(boxes.lines().count(), 31, "header plus one row per frame");

    // -- eval twice: identical bytes per report file -----------------------
    let eval_once = |dir: &Path| {
        let out = retrack(&[
            "eval",
            "--weights",
            bundle.to_str().unwrap(),
            "--seq-dir",
            data.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--protocol",
            "ope",
            "--mode",
            "rand",
            "--seed",
            "9",
            "--config",
            run_cfg.to_str().unwrap(),
        ]);
        assert_ok(&out, "eval");
    };
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    eval_once(&e1);
    eval_once(&e2);
    let mut names: Vec<String> = fs::read_dir(&e1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4, "three tables and one plot");
    assert!(names.iter().any(|n| n.ends_with(".svg")));
    for n in &names {
        assert!(n.starts_with("ope_rand_s9"), "protocol, mode, and seed in {n}");
        let a = fs::read(e1.join(n)).unwrap();
        let b = fs::read(e2.join(n)).unwrap();
        assert_eq!(a, b, "re-evaluation must reproduce {n} byte for byte");
    }

    // -- sweep and baselines -------------------------------------------------
    let sweep_cfg = root.join("sweep.cfg");
    write(&sweep_cfg, "pool_capacity=2\nintervals=5,40\n");
    let sweep_dir = root.join("sweep");
    let out = retrack(&[
        "sweep",
        "--weights",
        bundle.to_str().unwrap(),
        "--seq-dir",
        data.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--config",
        sweep_cfg.to_str().unwrap(),
    ]);
    assert_ok(&out, "sweep");
    let sweep = fs::read_to_string(sweep_dir.join("sweep_rl_s0.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    let base_dir = root.join("base");
    let out = retrack(&[
        "baselines",
        "--weights",
        bundle.to_str().unwrap(),
        "--seq-dir",
        data.to_str().unwrap(),
        "--out",
        base_dir.to_str().unwrap(),
        "--config",
        run_cfg.to_str().unwrap(),
    ]);
    assert_ok(&out, "baselines");
    let table = fs::read_to_string(base_dir.join("baselines_ope_s0.tsv")).unwrap();
    let modes: Vec<&str> =
        table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(modes, vec!["rl", "ml", "rand", "single"]);
}

#[test]
fn bad_invocations_exit_nonzero_with_a_message() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();

    // Unknown mode.
    let out = retrack(&[
        "track",
        "--weights",
        "nowhere.rdtw",
        "--seq-dir",
        ".",
        "--out",
        root.join("x").to_str().unwrap(),
        "--mode",
        "psychic",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("psychic"));

    // Missing weights file.
    let out = retrack(&[
        "eval",
        "--weights",
        root.join("absent.rdtw").to_str().unwrap(),
        "--out",
        root.join("y").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.rdtw"));

    // Config with an unknown key.
    let cfg = root.join("bad.cfg");
    fs::write(&cfg, "warp_speed=9\n").unwrap();
    let out = retrack(&[
        "pretrain-matcher",
        "--out",
        root.join("z").to_str().unwrap(),
        "--seed",
        "0",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));

    // Unknown subcommand is a usage error.
    let out = retrack(&["transmogrify"]);
    assert!(!out.status.success());
}
