//! State-visitation histograms over the arena.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// First 10% of environment steps.
    Early,
    /// Last 10% of environment steps.
    Late,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Late => "late",
        }
    }

    /// Phase of global step `step` out of `total`, if any.
    pub fn of_step(step: u64, total: u64) -> Option<Phase> {
        let tenth = total.div_ceil(10);
        if step < tenth {
            Some(Phase::Early)
        } else if step >= total.saturating_sub(tenth) {
            Some(Phase::Late)
        } else {
            None
        }
    }
}

/// `bins × bins` histogram over `[-w, w]²`; row index is y, column is x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationGrid {
    pub bins: usize,
    pub half_width: f64,
    pub phase: Phase,
    pub counts: Vec<u64>,
}

impl VisitationGrid {
    pub fn new(bins: usize, half_width: f64, phase: Phase) -> Self {
        assert!(bins > 0 && half_width > 0.0);
        Self {
            bins,
            half_width,
            phase,
            counts: vec![0; bins * bins],
        }
    }

    /// Bin edges along one axis (`bins + 1` values from −w to w).
    pub fn edges(&self) -> Vec<f64> {
        let w = self.half_width;
        (0..=self.bins)
            .map(|i| -w + 2.0 * w * i as f64 / self.bins as f64)
            .collect()
    }

    fn axis_bin(&self, v: f64) -> usize {
        let w = self.half_width;
        let f = (v.clamp(-w, w) + w) / (2.0 * w) * self.bins as f64;
        (f as usize).min(self.bins - 1)
    }

    pub fn bin_of(&self, pos: [f64; 2]) -> (usize, usize) {
        (self.axis_bin(pos[1]), self.axis_bin(pos[0]))
    }

    pub fn record(&mut self, pos: [f64; 2]) {
        if !(pos[0].is_finite() && pos[1].is_finite()) {
            return;
        }
        let (r, c) = self.bin_of(pos);
        self.counts[r * self.bins + c] += 1;
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.bins + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Builds a grid from recorded positions.
pub fn record_visitation(positions: &[[f64; 2]], bins: usize, half_width: f64, phase: Phase) -> VisitationGrid {
    let mut g = VisitationGrid::new(bins, half_width, phase);
    for p in positions {
        g.record(*p);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pinned_trajectory_is_one_hot_bin() {
        let g = record_visitation(&[[0.01, 0.01]; 100], 50, 1.0, Phase::Early);
        let hot: Vec<u64> = g.counts.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(hot, vec![100]);
    }

    #[test]
    fn edges_cover_arena() {
        let g = VisitationGrid::new(50, 1.0, Phase::Late);
        let e = g.edges();
        assert_eq!(e.len(), 51);
        assert_eq!(e[0], -1.0);
        assert_eq!(e[50], 1.0);
        assert_eq!(g.bin_of([1.0, -1.0]), (0, 49));
    }

    #[test]
    fn uniform_positions_fill_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<[f64; 2]> = (0..100_000)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let g = record_visitation(&pos, 10, 1.0, Phase::Early);
        let max = *g.counts.iter().max().unwrap() as f64;
        let min = *g.counts.iter().min().unwrap() as f64;
        assert!(max / min < 2.0);
    }

    #[test]
    fn phases() {
        assert_eq!(Phase::of_step(0, 1000), Some(Phase::Early));
        assert_eq!(Phase::of_step(99, 1000), Some(Phase::Early));
        assert_eq!(Phase::of_step(500, 1000), None);
        assert_eq!(Phase::of_step(900, 1000), Some(Phase::Late));
    }
}
