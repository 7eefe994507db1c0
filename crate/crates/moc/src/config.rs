//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Files are applied on top of
//! the defaults and CLI flags on top of files; the last writer wins and every
//! assignment is logged with its origin. [`ExperimentConfig::to_text`] emits
//! every key, and parsing that text reproduces the configuration exactly.

use std::fmt;
use std::path::{Path, PathBuf};

use moc_core::agent::LossForm;
use moc_core::curricula::ShapingMode;
use moc_core::envs::{EnvSpec, Task};
use moc_core::hypernet::CellKind;
use moc_core::nn::Activation;
use moc_core::trainer::{AdvantageMode, CriticOptimizer, GoalSampling, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    /// File name (or `--flag`) the bad assignment came from.
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.origin, l, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

/// A full experiment: the training configuration plus harness settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub outdir: PathBuf,
    /// Write a checkpoint every this many episodes; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub plot: bool,
    pub dump_trajectories: bool,
    /// Pretraining checkpoint to warm-start from.
    pub pretrain_from: Option<PathBuf>,
    pub visitation_bins: usize,
    /// Parallel runs in a matrix; 0 uses every core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            variants: vec![Variant::Moc],
            seeds: vec![0],
            outdir: PathBuf::from("out"),
            checkpoint_every: 0,
            plot: false,
            dump_trajectories: false,
            pretrain_from: None,
            visitation_bins: 50,
            jobs: 0,
        }
    }
}

fn choice<T: Copy + PartialEq>(table: &[(&'static str, T)], s: &str) -> Result<T, String> {
    table.iter().find(|(n, _)| *n == s).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got `{s}`", names.join(", "))
    })
}

fn name_of<T: Copy + PartialEq>(table: &[(&'static str, T)], v: T) -> &'static str {
    table.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every value is named")
}

const TASKS: &[(&str, Task)] = &[("reach", Task::Reach), ("push", Task::Push)];
const ACTIVATIONS: &[(&str, Activation)] = &[("relu", Activation::Relu), ("tanh", Activation::Tanh)];
const CELLS: &[(&str, CellKind)] = &[("lstm", CellKind::Lstm), ("tanh", CellKind::Tanh)];
const OPTIMIZERS: &[(&str, CriticOptimizer)] = &[("adam", CriticOptimizer::Adam), ("sgd", CriticOptimizer::Sgd)];
const FORMS: &[(&str, LossForm)] = &[("combined", LossForm::Combined), ("sum", LossForm::Sum)];
const SHAPING: &[(&str, ShapingMode)] = &[("normalized", ShapingMode::Normalized), ("invariant", ShapingMode::Invariant)];
const ADVANTAGES: &[(&str, AdvantageMode)] = &[
    ("auto", AdvantageMode::Auto),
    ("q_minus_v", AdvantageMode::QMinusV),
    ("gae", AdvantageMode::Gae),
];
const GOAL_SAMPLING: &[(&str, GoalSampling)] = &[
    ("per_outer_episode", GoalSampling::PerOuterEpisode),
    ("per_env_episode", GoalSampling::PerEnvEpisode),
];

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}` as a number"))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',').map(|x| num(x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `all` or a comma-separated list of variant names.
pub fn parse_variants(s: &str) -> Result<Vec<Variant>, String> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|v| v.trim().parse()).collect()
}

/// Parses `0,1,2` or an inclusive range `0..4`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (num(a.trim())?, num(b.trim())?);
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..=b).collect());
    }
    let seeds = list(s)?;
    if seeds.is_empty() {
        return Err("no seeds".into());
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let p = &mut t.ppo;
        match key {
            "task" => t.task = choice(TASKS, value)?,
            "variant" | "variants" => self.variants = parse_variants(value)?,
            "seed" => self.seeds = vec![num(value)?],
            "seeds" => self.seeds = parse_seeds(value)?,
            "outdir" => self.outdir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = num(value)?,
            "plot" => self.plot = boolean(value)?,
            "dump_trajectories" => self.dump_trajectories = boolean(value)?,
            "pretrain_from" => self.pretrain_from = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "visitation_bins" => self.visitation_bins = num(value)?,
            "jobs" => self.jobs = num(value)?,
            "total_env_steps" | "steps" => t.total_env_steps = num(value)?,
            "outer_episodes" => t.outer_episodes = num(value)?,
            "n_steps" => t.n_steps = num(value)?,
            "gamma" => p.gamma = num(value)?,
            "lr" => p.lr = num(value)?,
            "n_epochs" => p.n_epochs = num(value)?,
            "minibatch" => p.minibatch = num(value)?,
            "clip" => p.clip = num(value)?,
            "ent_coef" => p.ent_coef = num(value)?,
            "vf_coef" => p.vf_coef = num(value)?,
            "max_grad_norm" => p.max_grad_norm = num(value)?,
            "gae_lambda" => p.gae_lambda = num(value)?,
            "hidden" => t.hidden = list(value)?,
            "activation" => t.activation = choice(ACTIVATIONS, value)?,
            "init_log_std" => t.init_log_std = num(value)?,
            "buffer_capacity" => t.buffer_capacity = num(value)?,
            "persist_buffer" => t.persist_buffer = boolean(value)?,
            "hyper_hidden" => t.hyper_hidden = num(value)?,
            "hyper_z" => t.hyper_z = num(value)?,
            "hyper_cell" => t.hyper_cell = choice(CELLS, value)?,
            "base_hidden" => t.base_hidden = num(value)?,
            "reset_hyper_state" => t.reset_hyper_state = boolean(value)?,
            "mem_rows" => t.mem_rows = num(value)?,
            "mem_cols" => t.mem_cols = num(value)?,
            "critic_steps" => t.critic_steps = num(value)?,
            "critic_optimizer" => t.critic_optimizer = choice(OPTIMIZERS, value)?,
            "critic_lr" => t.critic_lr = num(value)?,
            "critic_batch" => t.critic_batch = num(value)?,
            "n_target" => t.n_target = num(value)?,
            "tau" => t.tau = num(value)?,
            "target_entropy_coef" => t.target_entropy_coef = num(value)?,
            "unroll_k" => t.unroll_k = num(value)?,
            "outer_lr" => t.outer_lr = num(value)?,
            "first_order" => t.first_order = boolean(value)?,
            "outer_batch" => t.outer_batch = num(value)?,
            "outer_max_grad_norm" => t.outer_max_grad_norm = num(value)?,
            "loss_form" => t.loss_form = choice(FORMS, value)?,
            "shaping_mode" => t.shaping_mode = choice(SHAPING, value)?,
            "shaping_window" => t.shaping_window = num(value)?,
            "mu" => t.mu = if value == "auto" { None } else { Some(num(value)?) },
            "advantage" => t.advantage = choice(ADVANTAGES, value)?,
            "goal_sampling" => t.goal_sampling = choice(GOAL_SAMPLING, value)?,
            "pretrain_episodes" => t.pretrain_episodes = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let p = &t.ppo;
        vec![
            ("task", name_of(TASKS, t.task).into()),
            ("variant", self.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")),
            ("seeds", join(&self.seeds)),
            ("outdir", self.outdir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("plot", self.plot.to_string()),
            ("dump_trajectories", self.dump_trajectories.to_string()),
            (
                "pretrain_from",
                self.pretrain_from.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string()),
            ),
            ("visitation_bins", self.visitation_bins.to_string()),
            ("jobs", self.jobs.to_string()),
            ("total_env_steps", t.total_env_steps.to_string()),
            ("outer_episodes", t.outer_episodes.to_string()),
            ("n_steps", t.n_steps.to_string()),
            ("gamma", p.gamma.to_string()),
            ("lr", p.lr.to_string()),
            ("n_epochs", p.n_epochs.to_string()),
            ("minibatch", p.minibatch.to_string()),
            ("clip", p.clip.to_string()),
            ("ent_coef", p.ent_coef.to_string()),
            ("vf_coef", p.vf_coef.to_string()),
            ("max_grad_norm", p.max_grad_norm.to_string()),
            ("gae_lambda", p.gae_lambda.to_string()),
            ("hidden", join(&t.hidden)),
            ("activation", name_of(ACTIVATIONS, t.activation).into()),
            ("init_log_std", t.init_log_std.to_string()),
            ("buffer_capacity", t.buffer_capacity.to_string()),
            ("persist_buffer", t.persist_buffer.to_string()),
            ("hyper_hidden", t.hyper_hidden.to_string()),
            ("hyper_z", t.hyper_z.to_string()),
            ("hyper_cell", name_of(CELLS, t.hyper_cell).into()),
            ("base_hidden", t.base_hidden.to_string()),
            ("reset_hyper_state", t.reset_hyper_state.to_string()),
            ("mem_rows", t.mem_rows.to_string()),
            ("mem_cols", t.mem_cols.to_string()),
            ("critic_steps", t.critic_steps.to_string()),
            ("critic_optimizer", name_of(OPTIMIZERS, t.critic_optimizer).into()),
            ("critic_lr", t.critic_lr.to_string()),
            ("critic_batch", t.critic_batch.to_string()),
            ("n_target", t.n_target.to_string()),
            ("tau", t.tau.to_string()),
            ("target_entropy_coef", t.target_entropy_coef.to_string()),
            ("unroll_k", t.unroll_k.to_string()),
            ("outer_lr", t.outer_lr.to_string()),
            ("first_order", t.first_order.to_string()),
            ("outer_batch", t.outer_batch.to_string()),
            ("outer_max_grad_norm", t.outer_max_grad_norm.to_string()),
            ("loss_form", name_of(FORMS, t.loss_form).into()),
            ("shaping_mode", name_of(SHAPING, t.shaping_mode).into()),
            ("shaping_window", t.shaping_window.to_string()),
            ("mu", t.mu.map_or_else(|| "auto".into(), |m| m.to_string())),
            ("advantage", name_of(ADVANTAGES, t.advantage).into()),
            ("goal_sampling", name_of(GOAL_SAMPLING, t.goal_sampling).into()),
            ("pretrain_episodes", t.pretrain_episodes.to_string()),
        ]
    }

    /// Serializes every key; environment constants follow as comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let e = EnvSpec::new(self.train.task);
        out.push_str(&format!(
            "# environment: arena_half_width = {}, max_steps = {}, success_radius = {}, dt = {}, damping = {}, contact_radius = {}\n",
            e.arena_half_width, e.max_steps, e.success_radius, e.dt, e.damping, e.contact_radius
        ));
        out
    }

    /// Applies a config file's text; `origin` names it in errors and logs.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                origin: origin.into(),
                line: Some(i + 1),
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            self.set(k, v).map_err(err)?;
            log::debug!("{k} = {v} (from {origin}:{})", i + 1);
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text, origin)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            line: None,
            message: e.to_string(),
        })?;
        self.apply_text(&text, &origin)
    }

    /// Applies a command-line override.
    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|message| ConfigError {
            origin: format!("--{key}"),
            line: None,
            message,
        })?;
        log::debug!("{key} = {value} (from command line)");
        Ok(())
    }

    /// Checks the training configuration for every run in the matrix.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError {
            origin: "config".into(),
            line: None,
            message,
        };
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(err("at least one variant and one seed are required".into()));
        }
        if self.visitation_bins == 0 {
            return Err(err("visitation_bins must be positive".into()));
        }
        for &v in &self.variants {
            self.run_config(v, self.seeds[0]).validate().map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// Training configuration of one cell of the matrix.
    pub fn run_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.outdir.join(variant.name()).join(seed.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut c = ExperimentConfig::default();
        for (k, v) in [
            ("task", "push"),
            ("variant", "all"),
            ("seeds", "0..2"),
            ("gamma", "0.99"),
            ("hidden", "32,16"),
            ("mu", "0.5"),
            ("loss_form", "sum"),
            ("pretrain_from", "a/b.json"),
            ("critic_lr", "0.1"),
        ] {
            c.set(k, v).unwrap();
        }
        assert_eq!(c.variants.len(), 9);
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(ExperimentConfig::from_text(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = ExperimentConfig::from_text("# header\ngamma = 0.9\nbogus = 1\n", "f.txt").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.to_string().starts_with("f.txt:3:"), "{e}");
    }

    #[test]
    fn malformed_line_and_value() {
        assert_eq!(ExperimentConfig::from_text("gamma 0.9", "f").unwrap_err().line, Some(1));
        assert!(ExperimentConfig::from_text("n_steps = many", "f").is_err());
        assert!(ExperimentConfig::from_text("plot = yes", "f").is_err());
    }

    #[test]
    fn last_writer_wins() {
        let mut c = ExperimentConfig::from_text("n_steps = 10\nn_steps = 20 # later\n", "f").unwrap();
        assert_eq!(c.train.n_steps, 20);
        c.apply_flag("n_steps", "30").unwrap();
        assert_eq!(c.train.n_steps, 30);
    }
}
