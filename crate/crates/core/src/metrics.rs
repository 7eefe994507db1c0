//! Per-episode metrics and the small statistics used to aggregate them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 10] = [
    "episode",
    "env_steps",
    "mean_episode_reward",
    "fractional_success",
    "J_goal",
    "J_init",
    "J_reward",
    "J_abstract",
    "J_outer",
    "hypergrad_norm",
];

/// One row of `metrics.csv`. Losses that do not apply to a variant are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub env_steps: u64,
    pub mean_episode_reward: f64,
    pub fractional_success: f64,
    pub j_goal: f64,
    pub j_init: f64,
    pub j_reward: f64,
    pub j_abstract: f64,
    pub j_outer: f64,
    pub hypergrad_norm: f64,
}

impl MetricsRecord {
    pub fn values(&self) -> [f64; 10] {
        [
            self.episode as f64,
            self.env_steps as f64,
            self.mean_episode_reward,
            self.fractional_success,
            self.j_goal,
            self.j_init,
            self.j_reward,
            self.j_abstract,
            self.j_outer,
            self.hypergrad_norm,
        ]
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

/// The last `frac` of `xs` (at least one element).
pub fn final_window(xs: &[f64], frac: f64) -> &[f64] {
    if xs.is_empty() {
        return xs;
    }
    let n = (libm::ceil(xs.len() as f64 * frac) as usize).clamp(1, xs.len());
    &xs[xs.len() - n..]
}

/// Per-index mean and sample std across equally long curves.
pub fn band(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            (mean(&col), sample_std(&col))
        })
        .collect()
}
