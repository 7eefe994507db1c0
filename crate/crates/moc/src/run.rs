//! Executing runs and writing their directories.
//!
//! `{outdir}/{variant}/{seed}/` holds `config.txt`, `metrics.csv`,
//! `curricula.jsonl`, `visitation-{early,late}.csv`, `memory.csv` and
//! `checkpoint-{episode}` files (plus `trajectories.jsonl` on request).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use moc_core::metrics::{MetricsRecord, METRICS_COLUMNS};
use moc_core::trainer::{pretrain, EpisodeReport, NullObserver, Observer, Trainer, Variant};
use moc_core::visitation::{Phase, VisitationGrid};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;

pub fn metrics_row(r: &MetricsRecord) -> Vec<String> {
    let v = r.values();
    let mut row = vec![r.episode.to_string(), r.env_steps.to_string()];
    row.extend(v[2..].iter().map(|x| x.to_string()));
    row
}

/// Writes one grid as CSV: a header of bin edges, then one row per y bin.
pub fn write_grid(path: &Path, g: &VisitationGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![format!("{}:y\\x", g.phase.name())];
    header.extend(g.edges().iter().take(g.bins).map(|e| e.to_string()));
    w.write_record(&header)?;
    let edges = g.edges();
    for r in 0..g.bins {
        let mut row = vec![edges[r].to_string()];
        row.extend((0..g.bins).map(|c| g.count(r, c).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Vec<Vec<u64>>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(rec.iter().skip(1).map(|c| c.parse()).collect::<Result<Vec<u64>, _>>()?);
    }
    Ok(out)
}

/// Observer that persists everything a run produces.
pub struct RunRecorder {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    curricula: BufWriter<File>,
    trajectories: Option<BufWriter<File>>,
    early: VisitationGrid,
    late: VisitationGrid,
    total_steps: u64,
    checkpoint_every: usize,
    /// Memory writes observed while the agent was collecting data.
    pub rollout_memory_writes: u64,
    /// Memory writes per outer episode, in order.
    pub episode_memory_writes: Vec<u64>,
    pub records: Vec<MetricsRecord>,
}

impl RunRecorder {
    pub fn create(dir: &Path, exp: &ExperimentConfig, trainer: &Trainer) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        metrics.write_record(METRICS_COLUMNS)?;
        metrics.flush()?;
        let cfg = trainer.config();
        let total_steps = cfg.effective_outer_episodes() as u64 * cfg.n_steps as u64;
        let w = trainer.env_spec().arena_half_width;
        Ok(Self {
            metrics,
            curricula: BufWriter::new(File::create(dir.join("curricula.jsonl"))?),
            trajectories: if exp.dump_trajectories {
                Some(BufWriter::new(File::create(dir.join("trajectories.jsonl"))?))
            } else {
                None
            },
            early: VisitationGrid::new(exp.visitation_bins, w, Phase::Early),
            late: VisitationGrid::new(exp.visitation_bins, w, Phase::Late),
            total_steps,
            checkpoint_every: exp.checkpoint_every,
            rollout_memory_writes: 0,
            episode_memory_writes: Vec::new(),
            records: Vec::new(),
            dir: dir.to_path_buf(),
        })
    }

    fn record(&mut self, trainer: &Trainer, rep: &EpisodeReport<'_>) -> Result<()> {
        let m = rep.metrics;
        self.metrics.write_record(metrics_row(m))?;
        self.metrics.flush()?;
        let b = rep.bundle;
        let line = json!({
            "episode": m.episode,
            "c_goal": b.c_goal,
            "c_init": b.c_init,
            "potential_params": b.potential.as_ref().map(|p| p.len()),
            "c_abs": b.c_abs,
            "mean_shaping": rep.mean_shaping,
        });
        writeln!(self.curricula, "{line}")?;
        for (i, p) in rep.positions.iter().enumerate() {
            match Phase::of_step(rep.first_step + i as u64, self.total_steps) {
                Some(Phase::Early) => self.early.record(*p),
                Some(Phase::Late) => self.late.record(*p),
                None => {}
            }
        }
        if let Some(w) = &mut self.trajectories {
            for (i, t) in rep.transitions.iter().enumerate() {
                let line = json!({
                    "episode": m.episode,
                    "step": rep.first_step + i as u64,
                    "s": t.s, "a": t.a, "r": t.r, "shaped_r": t.shaped_r,
                    "s_next": t.s_next, "done": t.done, "goal": t.goal,
                });
                writeln!(w, "{line}")?;
            }
        }
        self.rollout_memory_writes += rep.memory_writes_during_rollout;
        self.episode_memory_writes.push(rep.memory_writes_this_episode);
        self.records.push(m.clone());
        if self.checkpoint_every > 0 && (m.episode + 1) % self.checkpoint_every == 0 {
            self.checkpoint(trainer, m.episode)?;
        }
        Ok(())
    }

    fn checkpoint(&self, tr: &Trainer, episode: usize) -> Result<()> {
        Checkpoint::of(tr).save(&self.dir.join(format!("checkpoint-{episode}")))?;
        let mut w = csv::Writer::from_path(self.dir.join(format!("memory-{episode}.csv")))?;
        let mem = tr.memory();
        for r in 0..mem.rows() {
            w.write_record(mem.row(r).iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the final checkpoint and the visitation grids.
    pub fn finish(mut self, tr: &Trainer) -> Result<RunOutcome> {
        self.curricula.flush()?;
        if let Some(w) = &mut self.trajectories {
            w.flush()?;
        }
        let last = tr.episode().saturating_sub(1);
        self.checkpoint(tr, last)?;
        fs::copy(self.dir.join(format!("memory-{last}.csv")), self.dir.join("memory.csv"))?;
        write_grid(&self.dir.join("visitation-early.csv"), &self.early)?;
        write_grid(&self.dir.join("visitation-late.csv"), &self.late)?;
        Ok(RunOutcome {
            dir: self.dir,
            records: self.records,
            rollout_memory_writes: self.rollout_memory_writes,
            episode_memory_writes: self.episode_memory_writes,
        })
    }
}

impl Observer for RunRecorder {
    fn on_episode(&mut self, trainer: &Trainer, report: &EpisodeReport<'_>) -> Result<(), String> {
        self.record(trainer, report).map_err(|e| format!("{e:#}"))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub rollout_memory_writes: u64,
    pub episode_memory_writes: Vec<u64>,
}

/// Runs one (variant, seed) cell and writes its directory.
pub fn run_one(exp: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let dir = exp.run_dir(variant, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let snapshot = ExperimentConfig {
        variants: vec![variant],
        seeds: vec![seed],
        ..exp.clone()
    };
    fs::write(dir.join("config.txt"), snapshot.to_text())?;
    let cfg = exp.run_config(variant, seed);
    let mut tr = Trainer::new(cfg.clone())?;
    if let Some(path) = &exp.pretrain_from {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        ck.warm_start_into(&mut tr)?;
        log::info!("{variant}/{seed}: warm-started from {}", path.display());
    } else if cfg.pretrain_episodes > 0 && !tr.theta().is_empty() {
        let ws = pretrain(&cfg, &mut NullObserver)?;
        tr.apply_warm_start(&ws)?;
        log::info!("{variant}/{seed}: pretrained for {} episodes on {}", cfg.pretrain_episodes, cfg.task.pretraining_partner());
    }
    let mut rec = RunRecorder::create(&dir, exp, &tr)?;
    tr.train(&mut rec)?;
    let out = rec.finish(&tr)?;
    if let Some(last) = out.records.last() {
        log::info!(
            "{variant}/{seed}: {} episodes, {} env steps, final success {:.3}",
            out.records.len(),
            last.env_steps,
            last.fractional_success
        );
    }
    Ok(out)
}

/// Runs the pretraining phase alone and writes its checkpoint.
pub fn run_pretrain(exp: &ExperimentConfig, variant: Variant, seed: u64) -> Result<PathBuf> {
    let cfg = exp.run_config(variant, seed);
    let dir = exp.outdir.join("pretrain").join(variant.name()).join(seed.to_string());
    fs::create_dir_all(&dir)?;
    let ws = pretrain(&cfg, &mut NullObserver)?;
    let mut tr = Trainer::new(cfg.clone())?;
    tr.apply_warm_start(&ws)?;
    let path = dir.join(format!("checkpoint-{}", cfg.pretrain_episodes));
    Checkpoint::of(&tr).save(&path)?;
    Ok(path)
}

/// Runs every (variant, seed) cell, in parallel, and reports failures.
pub fn run_matrix(exp: &ExperimentConfig) -> Vec<(Variant, u64, Result<RunOutcome>)> {
    let cells: Vec<(Variant, u64)> = exp
        .variants
        .iter()
        .flat_map(|&v| exp.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let work = || {
        cells
            .par_iter()
            .map(|&(v, s)| (v, s, run_one(exp, v, s)))
            .collect::<Vec<_>>()
    };
    if exp.jobs > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(exp.jobs).build() {
            Ok(pool) => return pool.install(work),
            Err(e) => log::warn!("cannot build a {}-thread pool ({e}); using the global pool", exp.jobs),
        }
    }
    work()
}
