//! Command-line entry point.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::aggregate::{aggregate, format_table};
use crate::config::{ConfigError, ExperimentConfig};
use crate::plots::emit_plots;
use crate::run::{run_matrix, run_pretrain};

#[derive(Debug, Parser)]
#[command(name = "moc", version, about = "Multi-objective curriculum training and ablation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize every run under an output directory.
    Aggregate {
        outdir: PathBuf,
        /// Also render learning curves and visitation heatmaps.
        #[arg(long)]
        plot: bool,
    },
    /// Pretrain the curriculum components on the partner task and save them.
    Pretrain(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// reach or push.
    #[arg(long)]
    pub task: Option<String>,
    /// Variant name, comma-separated list, or `all`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds or an inclusive range `a..b`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Total environment steps per run.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Checkpoint to warm-start the curriculum components from.
    #[arg(long)]
    pub pretrain_from: Option<PathBuf>,
    /// Render SVG plots after the runs.
    #[arg(long)]
    pub plot: bool,
    /// Write every transition to trajectories.jsonl.
    #[arg(long)]
    pub dump_trajectories: bool,
    /// Override any config key, e.g. `--set n_steps=2048`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl RunArgs {
    /// Defaults, then the config file, then flags (last writer wins).
    pub fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut c = ExperimentConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let mut flag = |k: &str, v: Option<String>| -> Result<(), ConfigError> {
            match v {
                Some(v) => c.apply_flag(k, &v),
                None => Ok(()),
            }
        };
        flag("task", self.task.clone())?;
        flag("variant", self.variant.clone())?;
        flag("seed", self.seed.map(|s| s.to_string()))?;
        flag("seeds", self.seeds.clone())?;
        flag("total_env_steps", self.steps.map(|s| s.to_string()))?;
        flag("outdir", self.outdir.as_ref().map(|p| p.display().to_string()))?;
        flag("pretrain_from", self.pretrain_from.as_ref().map(|p| p.display().to_string()))?;
        flag("plot", self.plot.then(|| "true".into()))?;
        flag("dump_trajectories", self.dump_trajectories.then(|| "true".into()))?;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError {
                origin: "--set".into(),
                line: None,
                message: format!("expected KEY=VALUE, got `{o}`"),
            })?;
            c.apply_flag(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn execute(exp: &ExperimentConfig) -> i32 {
    let results = run_matrix(exp);
    let mut failed = 0;
    for (v, s, r) in &results {
        if let Err(e) = r {
            log::error!("{v}/{s} failed: {e:#}");
            failed += 1;
        }
    }
    match aggregate(&exp.outdir) {
        Ok(s) => print!("{}", format_table(&s)),
        Err(e) => {
            log::error!("aggregation failed: {e:#}");
            failed += 1;
        }
    }
    if exp.plot {
        if let Err(e) = emit_plots(&exp.outdir) {
            log::error!("{e:#}");
            failed += 1;
        }
    }
    i32::from(failed > 0)
}

/// Parses `argv` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.command {
        Some(Command::Aggregate { outdir, plot }) => {
            let s = match aggregate(&outdir) {
                Ok(s) => s,
                Err(e) => {
                    log::error!("{e:#}");
                    return 1;
                }
            };
            print!("{}", format_table(&s));
            if plot {
                if let Err(e) = emit_plots(&outdir) {
                    log::error!("{e:#}");
                    return 1;
                }
            }
            0
        }
        Some(Command::Pretrain(args)) => {
            let exp = match args.build() {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            let mut code = 0;
            for &v in &exp.variants {
                for &s in &exp.seeds {
                    match run_pretrain(&exp, v, s) {
                        Ok(p) => println!("{}", p.display()),
                        Err(e) => {
                            log::error!("{v}/{s} pretraining failed: {e:#}");
                            code = 1;
                        }
                    }
                }
            }
            code
        }
        None => match cli.run.build() {
            Ok(exp) => execute(&exp),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
    }
}
