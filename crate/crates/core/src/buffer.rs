//! Transitions and the FIFO replay buffer they are drawn from.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// One environment step together with the curriculum context it was
/// collected under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Observation (state followed by the task goal).
    pub s: Vec<f64>,
    /// Sampled action before clipping; the environment saw it clipped.
    pub a: Vec<f64>,
    /// Environment reward, unshaped.
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    /// Goal slot the agent was conditioned on (active subgoal or task goal).
    pub goal: Vec<f64>,
    /// Abstract curriculum read at collection time.
    pub c_abs: Vec<f64>,
    pub log_prob: f64,
    /// `r` plus the shaping term recorded at collection time.
    pub shaped_r: f64,
    /// Subgoal segment index within the environment episode.
    pub segment: usize,
}

impl Transition {
    pub fn validate(&self, c_abs_dim: usize) -> Result<()> {
        let vecs: [(&'static str, &[f64]); 5] = [
            ("s", &self.s),
            ("a", &self.a),
            ("s_next", &self.s_next),
            ("goal", &self.goal),
            ("c_abs", &self.c_abs),
        ];
        for (name, v) in vecs {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        for (name, x) in [
            ("r", self.r),
            ("log_prob", self.log_prob),
            ("shaped_r", self.shaped_r),
        ] {
            if !x.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.s.len() != self.s_next.len() {
            return Err(Error::Dimension {
                field: "s_next",
                expected: self.s.len(),
                got: self.s_next.len(),
            });
        }
        if self.c_abs.len() != c_abs_dim {
            return Err(Error::Dimension {
                field: "c_abs",
                expected: c_abs_dim,
                got: self.c_abs.len(),
            });
        }
        Ok(())
    }
}

/// Bounded FIFO store; pushing past capacity evicts the oldest entry.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    c_abs_dim: usize,
    entries: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, c_abs_dim: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            capacity,
            c_abs_dim,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate(self.c_abs_dim)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
        Ok(())
    }

    /// Uniform indices with replacement. In strict mode asking for more
    /// samples than stored entries is an error; otherwise only an empty
    /// buffer is.
    pub fn sample_indices(&self, n: usize, rng: &mut StreamRng, strict: bool) -> Result<Vec<usize>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.entries.is_empty() || (strict && n > self.entries.len()) {
            return Err(Error::InsufficientData {
                requested: n,
                available: self.entries.len(),
            });
        }
        let len = self.entries.len();
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }

    pub fn sample(&self, n: usize, seed: u64, strict: bool) -> Result<Vec<&Transition>> {
        let mut rng = StreamRng::seed_from_u64(seed);
        let idx = self.sample_indices(n, &mut rng, strict)?;
        Ok(idx.into_iter().map(|i| &self.entries[i]).collect())
    }
}
