use std::fs;
use std::path::Path;

use moc::aggregate::{aggregate, read_metrics};
use moc::checkpoint::{Checkpoint, CheckpointError};
use moc::cli;
use moc::config::ExperimentConfig;
use moc::run::{read_grid, run_one};
use moc_core::trainer::{NullObserver, Trainer, Variant};

fn tiny(outdir: &Path) -> ExperimentConfig {
    let mut exp = ExperimentConfig::default();
    exp.train.n_steps = 256;
    exp.train.outer_episodes = 3;
    exp.train.hidden = vec![16];
    exp.train.ppo.n_epochs = 1;
    exp.outdir = outdir.to_path_buf();
    exp.visitation_bins = 10;
    exp.jobs = 1;
    exp
}

fn cli_args(outdir: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "moc",
        "--outdir",
        outdir.to_str().unwrap(),
        "--set",
        "n_steps=256",
        "--set",
        "outer_episodes=2",
        "--set",
        "hidden=16",
        "--set",
        "n_epochs=1",
        "--set",
        "jobs=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn run_directory_has_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = tiny(tmp.path());
    exp.dump_trajectories = true;
    exp.checkpoint_every = 2;
    let out = run_one(&exp, Variant::Moc, 3).unwrap();
    let dir = tmp.path().join("moc").join("3");
    assert_eq!(out.dir, dir);
    for f in [
        "config.txt",
        "metrics.csv",
        "curricula.jsonl",
        "trajectories.jsonl",
        "visitation-early.csv",
        "visitation-late.csv",
        "memory.csv",
        "memory-1.csv",
        "checkpoint-1",
        "checkpoint-2",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let recs = read_metrics(&dir.join("metrics.csv")).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs, out.records);
    assert_eq!(recs.last().unwrap().env_steps, 3 * 256);
    let curricula = fs::read_to_string(dir.join("curricula.jsonl")).unwrap();
    assert_eq!(curricula.lines().count(), 3);
    let traj = fs::read_to_string(dir.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 3 * 256);
    let early = read_grid(&dir.join("visitation-early.csv")).unwrap();
    assert_eq!(early.len(), 10);
    assert!(early.iter().flatten().sum::<u64>() > 0);
    assert_eq!(out.rollout_memory_writes, 0);
    assert_eq!(out.episode_memory_writes, vec![1, 1, 1]);
}

#[test]
fn config_snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = tiny(&tmp.path().join("first"));
    run_one(&exp, Variant::MocMemoryMinus, 1).unwrap();
    let first = exp.run_dir(Variant::MocMemoryMinus, 1);
    let text = fs::read_to_string(first.join("config.txt")).unwrap();
    let mut again = ExperimentConfig::from_text(&text, "config.txt").unwrap();
    assert_eq!(again.train, exp.train);
    again.outdir = tmp.path().join("second");
    run_one(&again, Variant::MocMemoryMinus, 1).unwrap();
    let a = fs::read(first.join("metrics.csv")).unwrap();
    let b = fs::read(again.run_dir(Variant::MocMemoryMinus, 1).join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

fn resume_matches_uninterrupted(variant: Variant, persist_buffer: bool) {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = tiny(tmp.path());
    exp.train.persist_buffer = persist_buffer;
    let cfg = exp.run_config(variant, 0);

    let mut full = Trainer::new(cfg.clone()).unwrap();
    let reference = full.train(&mut NullObserver).unwrap();

    let mut a = Trainer::new(cfg.clone()).unwrap();
    let first = a.run_episode(&mut NullObserver).unwrap();
    let path = tmp.path().join("ck");
    Checkpoint::of(&a).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck, Checkpoint::of(&a));
    let mut b = Trainer::new(cfg).unwrap();
    ck.restore_into(&mut b).unwrap();
    assert_eq!(b.theta(), a.theta());
    assert_eq!(b.episode(), 1);
    let mut resumed = vec![first];
    resumed.extend(b.train(&mut NullObserver).unwrap());
    assert_eq!(resumed, reference);
    assert_eq!(b.theta(), full.theta());
}

#[test]
fn checkpoint_resume_is_exact_without_a_carried_buffer() {
    resume_matches_uninterrupted(Variant::Moc, false);
    resume_matches_uninterrupted(Variant::Ppo, true);
}

#[test]
fn checkpoint_rejects_other_shapes_and_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = tiny(tmp.path());
    let tr = Trainer::new(exp.run_config(Variant::Moc, 0)).unwrap();
    let path = tmp.path().join("ck");
    Checkpoint::of(&tr).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();

    let mut other = exp.run_config(Variant::Moc, 0);
    other.mem_rows += 1;
    let mut wrong = Trainer::new(other).unwrap();
    assert!(matches!(ck.warm_start_into(&mut wrong), Err(CheckpointError::Manifest(_))));

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Version(99))));
    fs::write(&path, "{\"format\":\"something-else\"}").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Format(_))));
}

#[test]
fn warm_start_from_checkpoint_copies_outer_state_only() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = tiny(tmp.path());
    let mut src = Trainer::new(exp.run_config(Variant::Moc, 5)).unwrap();
    src.run_episode(&mut NullObserver).unwrap();
    let ck = Checkpoint::of(&src);
    let mut dst = Trainer::new(exp.run_config(Variant::Moc, 6)).unwrap();
    let agent_before = dst.agent_params().clone();
    ck.warm_start_into(&mut dst).unwrap();
    assert_eq!(dst.theta(), src.theta());
    assert_eq!(dst.memory().data(), src.memory().data());
    assert_eq!(dst.agent_params(), &agent_before);
    assert_eq!(dst.episode(), 0);
}

#[test]
fn aggregate_reads_csv_only_and_lists_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = tiny(tmp.path());
    exp.train.outer_episodes = 2;
    for seed in [0, 1] {
        run_one(&exp, Variant::Ppo, seed).unwrap();
    }
    // a run directory that never produced metrics
    fs::create_dir_all(tmp.path().join("ppo").join("2")).unwrap();
    let before: Vec<_> = walk(tmp.path());
    let s = aggregate(tmp.path()).unwrap();
    assert_eq!(s.rows.len(), 1);
    assert_eq!(s.rows[0].seeds, 2);
    assert_eq!(s.missing.len(), 1);
    assert!(tmp.path().join("summary.csv").is_file());
    // apart from summary.csv nothing is written
    let after: Vec<_> = walk(tmp.path()).into_iter().filter(|p| !p.ends_with("summary.csv")).collect();
    assert_eq!(before, after);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn cli_usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli::run(["moc", "--no-such-flag"]), 2);
    assert_eq!(cli::run(cli_args(tmp.path(), &["--variant", "moc_bogus"])), 2);
    assert_eq!(cli::run(cli_args(tmp.path(), &["--set", "unknown_key=1"])), 2);
    assert_eq!(cli::run(cli_args(tmp.path(), &["--set", "n_steps"])), 2);
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "n_steps = 64\n# comment\nlr = fast\n").unwrap();
    assert_eq!(cli::run(cli_args(tmp.path(), &["--config", cfg.to_str().unwrap()])), 2);
    assert!(!tmp.path().join("moc").exists());
}

#[test]
fn cli_runs_a_matrix_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.txt");
    fs::write(&cfg, "task = reach\nn_steps = 64\n").unwrap();
    // flags override the file: n_steps comes from --set
    let code = cli::run(cli_args(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--variant", "ppo,moc_memory_minus", "--seeds", "0..1", "--plot"],
    ));
    assert_eq!(code, 0);
    for v in ["ppo", "moc_memory_minus"] {
        for s in ["0", "1"] {
            let recs = read_metrics(&tmp.path().join(v).join(s).join("metrics.csv")).unwrap();
            assert_eq!(recs.len(), 2);
            assert_eq!(recs[1].env_steps, 512);
        }
    }
    assert!(tmp.path().join("summary.csv").is_file());
    assert!(tmp.path().join("curves-reach-success.svg").is_file());
    assert!(tmp.path().join("ppo").join("0").join("visitation-late.svg").is_file());
    assert_eq!(cli::run(["moc", "aggregate", tmp.path().to_str().unwrap()]), 0);
}
