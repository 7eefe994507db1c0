//! Curriculum Base-RNNs: subgoal sequence, initial state and shaping
//! potential, each run with generated (or directly owned) parameters.
//!
//! Base step (row-vector form): `h' = tanh(h W_hᵀ + x W_xᵀ + b)`,
//! `y = h' W_oᵀ + b_o`. Goal and position outputs are squashed by tanh and
//! scaled into the arena box `[-w, w]`.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hypernet::{BaseShape, BaseVars, GeneratedParams};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Subgoals per environment episode; each covers `max_steps / 4` steps.
pub const SUBGOAL_SEGMENTS: usize = 4;

/// Segment index of environment step `step` (0-based).
pub fn segment_of(step: usize, max_steps: usize) -> usize {
    let len = (max_steps / SUBGOAL_SEGMENTS).max(1);
    (step / len).min(SUBGOAL_SEGMENTS - 1)
}

/// One Base-RNN step on the tape. `h` is B×N_h, `x` is B×N_x.
pub fn base_step<S: Real>(t: &mut Tape<S>, bv: &BaseVars, h: Var, x: Var) -> (Var, Var) {
    let wht = t.transpose(bv.w_h);
    let wxt = t.transpose(bv.w_x);
    let a = t.matmul(h, wht);
    let b = t.matmul(x, wxt);
    let pre = t.add(a, b);
    let pre = t.add_bcast(pre, bv.b);
    let h_new = t.tanh(pre);
    let wot = t.transpose(bv.w_o);
    let y = t.matmul(h_new, wot);
    let y = t.add_bcast(y, bv.b_o);
    (h_new, y)
}

fn to_box<S: Real>(t: &mut Tape<S>, raw: Var, half_width: f64) -> Var {
    let s = t.tanh(raw);
    t.scale(s, half_width)
}

/// Open-loop subgoal sequence: `n` steps from a zero hidden state on the
/// episode context (1×N_x). Each output is 1×2 inside the box.
pub fn subgoals_tape<S: Real>(
    t: &mut Tape<S>,
    bv: &BaseVars,
    context: Var,
    n: usize,
    half_width: f64,
) -> Vec<Var> {
    let mut h = t.constant(1, bv.shape.hidden, vec![S::zero(); bv.shape.hidden]);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (hn, y) = base_step(t, bv, h, context);
        h = hn;
        out.push(to_box(t, y, half_width));
    }
    out
}

/// Initial state as 1×6: `[agent pos, zero velocity, object pos]`.
pub fn init_state_tape<S: Real>(t: &mut Tape<S>, bv: &BaseVars, context: Var, half_width: f64) -> Var {
    assert_eq!(bv.shape.output, 4, "init Base-RNN must emit agent and object positions");
    let h = t.constant(1, bv.shape.hidden, vec![S::zero(); bv.shape.hidden]);
    let (_, y) = base_step(t, bv, h, context);
    let pos = to_box(t, y, half_width);
    let agent = t.slice_cols(pos, 0, 2);
    let object = t.slice_cols(pos, 2, 2);
    let vel = t.constant(1, 2, vec![S::zero(); 2]);
    t.concat_cols(&[agent, vel, object])
}

/// Potential `f(s)` for a batch of states (B×N_x) → B×1: a single Base-RNN
/// step from zero hidden state, so it depends on the state alone.
pub fn potential_tape<S: Real>(t: &mut Tape<S>, bv: &BaseVars, states: Var) -> Var {
    assert_eq!(bv.shape.output, 1, "reward Base-RNN must emit a scalar");
    let (b, _) = t.shape(states);
    let h = t.constant(b, bv.shape.hidden, vec![S::zero(); b * bv.shape.hidden]);
    let (_, y) = base_step(t, bv, h, states);
    y
}

/// Base-RNN over a plain parameter vector, for rollout-time evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseRnn {
    pub shape: BaseShape,
    pub theta_b: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl BaseRnn {
    pub fn new(shape: BaseShape, theta_b: Vec<f64>) -> Self {
        assert_eq!(theta_b.len(), shape.param_count(), "Base-RNN parameter length mismatch");
        Self {
            hidden: vec![0.0; shape.hidden],
            shape,
            theta_b,
        }
    }

    pub fn from_generated(g: &GeneratedParams) -> Self {
        Self::new(g.shape, g.theta_b.clone())
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Advances one step and returns the raw output head.
    pub fn step(&mut self, x: &[f64]) -> Vec<f64> {
        let (nh, nx, no) = (self.shape.hidden, self.shape.input, self.shape.output);
        assert_eq!(x.len(), nx, "Base-RNN input dimension mismatch");
        let p = &self.theta_b;
        let (w_h, rest) = p.split_at(nh * nh);
        let (w_x, rest) = rest.split_at(nh * nx);
        let (b, rest) = rest.split_at(nh);
        let (w_o, b_o) = rest.split_at(no * nh);
        let mut h = vec![0.0; nh];
        for i in 0..nh {
            let mut acc = 0.0;
            for j in 0..nh {
                acc += self.hidden[j] * w_h[i * nh + j];
            }
            for j in 0..nx {
                acc += x[j] * w_x[i * nx + j];
            }
            h[i] = libm::tanh(acc + b[i]);
        }
        self.hidden = h;
        (0..no)
            .map(|o| {
                let mut acc = 0.0;
                for j in 0..nh {
                    acc += self.hidden[j] * w_o[o * nh + j];
                }
                acc + b_o[o]
            })
            .collect()
    }
}

/// Next subgoal from the subgoal Base-RNN, scaled into `[-w, w]²`.
pub fn gen_subgoal(rnn: &mut BaseRnn, context: &[f64], half_width: f64) -> [f64; 2] {
    let y = rnn.step(context);
    [half_width * libm::tanh(y[0]), half_width * libm::tanh(y[1])]
}

/// The full open-loop subgoal sequence for one episode.
pub fn gen_subgoals(rnn: &mut BaseRnn, context: &[f64], half_width: f64, n: usize) -> Vec<[f64; 2]> {
    rnn.reset();
    (0..n).map(|_| gen_subgoal(rnn, context, half_width)).collect()
}

/// Initial state `[agent pos, 0, 0, object pos]` from a single step.
pub fn gen_init_state(rnn: &mut BaseRnn, context: &[f64], half_width: f64) -> Vec<f64> {
    rnn.reset();
    let y = rnn.step(context);
    let p: Vec<f64> = y.iter().map(|v| half_width * libm::tanh(*v)).collect();
    vec![p[0], p[1], 0.0, 0.0, p[2], p[3]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapingMode {
    /// Raw potential difference; preserves optimal policies when μ = λ.
    Invariant,
    /// Min-max normalized into [0, 1] over a sliding window.
    Normalized,
}

/// State potential backed by the reward Base-RNN.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialFn {
    rnn: BaseRnn,
    pub mu: f64,
}

impl PotentialFn {
    pub fn new(shape: BaseShape, theta_b: Vec<f64>, mu: f64) -> Self {
        Self {
            rnn: BaseRnn::new(shape, theta_b),
            mu,
        }
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let mut rnn = self.rnn.clone();
        rnn.reset();
        rnn.step(s)[0]
    }

    /// `μ·f(s′) − f(s)`.
    pub fn raw(&self, s: &[f64], s_next: &[f64]) -> f64 {
        raw_shaping(self.mu, self.value(s), self.value(s_next))
    }
}

pub fn raw_shaping(mu: f64, f_s: f64, f_next: f64) -> f64 {
    mu * f_next - f_s
}

/// Sliding-window min/max normalizer (monotonic deques, O(1) amortized).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingNormalizer {
    window: usize,
    count: u64,
    mins: VecDeque<(u64, f64)>,
    maxs: VecDeque<(u64, f64)>,
}

impl ShapingNormalizer {
    pub fn new(window: usize) -> Self {
        assert!(window > 0);
        Self {
            window,
            count: 0,
            mins: VecDeque::new(),
            maxs: VecDeque::new(),
        }
    }

    pub fn observe(&mut self, x: f64) {
        if !x.is_finite() {
            return;
        }
        let i = self.count;
        self.count += 1;
        while self.mins.back().is_some_and(|&(_, v)| v >= x) {
            self.mins.pop_back();
        }
        self.mins.push_back((i, x));
        while self.maxs.back().is_some_and(|&(_, v)| v <= x) {
            self.maxs.pop_back();
        }
        self.maxs.push_back((i, x));
        let oldest = self.count.saturating_sub(self.window as u64);
        while self.mins.front().is_some_and(|&(j, _)| j < oldest) {
            self.mins.pop_front();
        }
        while self.maxs.front().is_some_and(|&(j, _)| j < oldest) {
            self.maxs.pop_front();
        }
    }

    /// `(min, max)` over the window, or `None` before any observation.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        Some((self.mins.front()?.1, self.maxs.front()?.1))
    }
}

/// Maps a raw shaping value into [0, 1] given window bounds. A degenerate
/// window (max = min) maps everything to 0.5.
pub fn normalize_shaping(raw: f64, bounds: Option<(f64, f64)>) -> f64 {
    match bounds {
        Some((lo, hi)) if hi > lo => ((raw - lo) / (hi - lo)).clamp(0.0, 1.0),
        _ => 0.5,
    }
}

/// Shaping term added to the environment reward. In normalized mode the
/// value is first recorded in the window and then normalized against it.
pub fn shaping_reward(
    pot: &PotentialFn,
    s: &[f64],
    s_next: &[f64],
    mode: ShapingMode,
    norm: &mut ShapingNormalizer,
) -> f64 {
    let raw = pot.raw(s, s_next);
    match mode {
        ShapingMode::Invariant => raw,
        ShapingMode::Normalized => {
            norm.observe(raw);
            normalize_shaping(raw, norm.bounds())
        }
    }
}
