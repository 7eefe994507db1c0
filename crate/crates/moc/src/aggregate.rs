//! Cross-seed summaries, computed only from the metrics files on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use moc_core::metrics::{final_window, mean, sample_std, MetricsRecord, METRICS_COLUMNS};

use crate::config::ExperimentConfig;

/// Fraction of episodes (from the end) that forms the final window.
pub const FINAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub variant: String,
    pub task: String,
    pub seed: String,
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    /// Final-window means of (episode reward, fractional success).
    pub fn final_means(&self) -> (f64, f64) {
        let r: Vec<f64> = self.records.iter().map(|m| m.mean_episode_reward).collect();
        let s: Vec<f64> = self.records.iter().map(|m| m.fractional_success).collect();
        (mean(final_window(&r, FINAL_FRACTION)), mean(final_window(&s, FINAL_FRACTION)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub variant: String,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub success_mean: f64,
    pub success_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Run directories without usable metrics.
    pub missing: Vec<PathBuf>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        anyhow::bail!("{}: unexpected columns {:?}", path.display(), header);
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> { Ok(rec[i].parse::<f64>()?) };
        out.push(MetricsRecord {
            episode: rec[0].parse()?,
            env_steps: rec[1].parse()?,
            mean_episode_reward: f(2)?,
            fractional_success: f(3)?,
            j_goal: f(4)?,
            j_init: f(5)?,
            j_reward: f(6)?,
            j_abstract: f(7)?,
            j_outer: f(8)?,
            hypergrad_norm: f(9)?,
        });
    }
    Ok(out)
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(p)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Finds every `{variant}/{seed}/` run under `outdir`.
pub fn scan(outdir: &Path) -> Result<(Vec<RunMetrics>, Vec<PathBuf>)> {
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for vdir in sorted_dirs(outdir).with_context(|| format!("listing {}", outdir.display()))? {
        let Some(variant) = vdir.file_name().and_then(|n| n.to_str()).map(String::from) else {
            continue;
        };
        if variant.parse::<moc_core::trainer::Variant>().is_err() {
            continue;
        }
        for sdir in sorted_dirs(&vdir)? {
            let seed = sdir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let task = fs::read_to_string(sdir.join("config.txt"))
                .ok()
                .and_then(|t| ExperimentConfig::from_text(&t, "config.txt").ok())
                .map(|c| c.train.task.name().to_string());
            let records = read_metrics(&sdir.join("metrics.csv")).unwrap_or_default();
            match task {
                Some(task) if !records.is_empty() => runs.push(RunMetrics {
                    variant: variant.clone(),
                    task,
                    seed,
                    records,
                }),
                _ => missing.push(sdir),
            }
        }
    }
    Ok((runs, missing))
}

/// Mean ± sample std across seeds of the final-window means, per (task, variant).
pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in runs {
        cells
            .entry((r.task.clone(), r.variant.clone()))
            .or_default()
            .push(r.final_means());
    }
    cells
        .into_iter()
        .map(|((task, variant), v)| {
            let rw: Vec<f64> = v.iter().map(|x| x.0).collect();
            let sc: Vec<f64> = v.iter().map(|x| x.1).collect();
            SummaryRow {
                task,
                variant,
                seeds: v.len(),
                reward_mean: mean(&rw),
                reward_std: sample_std(&rw),
                success_mean: mean(&sc),
                success_std: sample_std(&sc),
            }
        })
        .collect()
}

pub fn format_table(s: &Summary) -> String {
    let mut out = format!(
        "{:<6} {:<30} {:>5} {:>22} {:>22}\n",
        "task", "variant", "seeds", "mean episode reward", "fractional success"
    );
    for r in &s.rows {
        out.push_str(&format!(
            "{:<6} {:<30} {:>5} {:>22} {:>22}\n",
            r.task,
            r.variant,
            r.seeds,
            format!("{:.3} (±{:.3})", r.reward_mean, r.reward_std),
            format!("{:.3} (±{:.3})", r.success_mean, r.success_std),
        ));
    }
    for m in &s.missing {
        out.push_str(&format!("missing: {}\n", m.display()));
    }
    out
}

/// Reads every run under `outdir`, writes `summary.csv` and returns the summary.
pub fn aggregate(outdir: &Path) -> Result<Summary> {
    let (runs, missing) = scan(outdir)?;
    let summary = Summary {
        rows: summarize(&runs),
        missing,
    };
    let mut w = csv::Writer::from_path(outdir.join("summary.csv"))?;
    w.write_record([
        "task",
        "variant",
        "seeds",
        "reward_mean",
        "reward_std",
        "success_mean",
        "success_std",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.task.clone(),
            r.variant.clone(),
            r.seeds.to_string(),
            r.reward_mean.to_string(),
            r.reward_std.to_string(),
            r.success_mean.to_string(),
            r.success_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: &str, rewards: &[f64]) -> RunMetrics {
        RunMetrics {
            variant: "moc".into(),
            task: "reach".into(),
            seed: seed.into(),
            records: rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| MetricsRecord {
                    episode: i,
                    mean_episode_reward: r,
                    fractional_success: r / 10.0,
                    ..MetricsRecord::default()
                })
                .collect(),
        }
    }

    #[test]
    fn constant_single_run() {
        let s = summarize(&[run("0", &[5.0; 20])]);
        assert_eq!(s[0].reward_mean, 5.0);
        assert_eq!(s[0].reward_std, 0.0);
    }

    #[test]
    fn two_seeds_sample_std() {
        let s = summarize(&[run("0", &[4.0; 10]), run("1", &[6.0; 10])]);
        assert_eq!(s[0].seeds, 2);
        assert_eq!(s[0].reward_mean, 5.0);
        assert!((s[0].reward_std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn only_final_window_counts() {
        let mut r = vec![0.0; 18];
        r.extend([10.0, 10.0]);
        assert_eq!(summarize(&[run("0", &r)])[0].reward_mean, 10.0);
    }
}
