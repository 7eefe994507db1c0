//! Curriculum-conditioned PPO actor-critic.
//!
//! * π and V see `[observation, goal slot, c_abs]`; the goal slot carries the
//!   active subgoal (or the task goal when subgoals are off).
//! * Q sees `[observation, clipped action, goal slot, f(s), c_init, c_abs]`
//!   and is trained only through the curriculum Bellman losses.
//! * Look-ahead targets use frozen target copies of π and Q:
//!   `ẏ = r + λ·E_{a′∼π}[Q(s′, a′, …) − log π(a′|s′)]`, and the shaped
//!   `y⃛` adds `μ·f(s′) − f(s)` (optionally min-max normalized).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::buffer::Transition;
use crate::curricula::{potential_tape, ShapingMode};
use crate::envs::{GOAL_DIM, OBS_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::hypernet::BaseVars;
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::params::{all_finite, clip_grad_norm};
use crate::real::Real;
use crate::tape::{Tape, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Input/output dimensions shared by the three heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDims {
    pub obs: usize,
    pub act: usize,
    pub goal: usize,
    pub init: usize,
    pub mem: usize,
}

impl AgentDims {
    pub fn point_mass(mem: usize) -> Self {
        Self {
            obs: OBS_DIM,
            act: 2,
            goal: GOAL_DIM,
            init: STATE_DIM,
            mem,
        }
    }

    pub fn policy_input(&self) -> usize {
        self.obs + self.goal + self.mem
    }

    pub fn q_input(&self) -> usize {
        self.obs + self.act + self.goal + 1 + self.init + self.mem
    }
}

/// The three networks; parameters live in [`AgentParams`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub dims: AgentDims,
    pub policy: Mlp,
    pub value: Mlp,
    pub q: Mlp,
}

impl Networks {
    pub fn new(dims: AgentDims, hidden: &[usize], act: Activation) -> Self {
        Self {
            dims,
            policy: Mlp::new(dims.policy_input(), hidden, dims.act, act),
            value: Mlp::new(dims.policy_input(), hidden, 1, act),
            q: Mlp::new(dims.q_input(), hidden, 1, act),
        }
    }

    /// Policy vector length: MLP weights followed by the log-std row.
    pub fn policy_len(&self) -> usize {
        self.policy.layout().len() + self.dims.act
    }

    pub fn log_std<'a>(&self, pi: &'a [f64]) -> &'a [f64] {
        &pi[self.policy.layout().len()..]
    }

    pub fn policy_mean(&self, pi: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.policy.layout().len();
        self.policy.eval(&pi[..n], x).into_iter().map(libm::tanh).collect()
    }

    /// Samples an unclipped action and returns it with its log-probability.
    pub fn act<R: Rng + ?Sized>(&self, pi: &[f64], x: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mean = self.policy_mean(pi, x);
        let ls: Vec<f64> = self.log_std(pi).iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let a: Vec<f64> = mean
            .iter()
            .zip(&ls)
            .map(|(m, l)| m + libm::exp(*l) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&a, &mean, &ls);
        (a, lp)
    }

    pub fn deterministic_action(&self, pi: &[f64], x: &[f64]) -> Vec<f64> {
        self.policy_mean(pi, x)
    }

    pub fn value_of(&self, v: &[f64], x: &[f64]) -> f64 {
        self.value.eval(v, x)[0]
    }

    pub fn q_of(&self, q: &[f64], x: &[f64]) -> f64 {
        self.q.eval(q, x)[0]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentParams {
        let mut pi = self.policy.init(rng, 0.01);
        pi.extend(vec![0.0; self.dims.act]);
        let v = self.value.init(rng, 1.0);
        let q = self.q.init(rng, 1.0);
        AgentParams {
            pi_targ: pi.clone(),
            q_targ: q.clone(),
            pi,
            v,
            q,
        }
    }

    /// Batched `tanh` policy mean on the tape.
    pub fn policy_mean_tape<S: Real>(&self, t: &mut Tape<S>, mlp_vars: &[Var], x: Var) -> Var {
        let m = self.policy.forward(t, mlp_vars, x);
        t.tanh(m)
    }
}

/// All agent parameters, including frozen target copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub pi: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub pi_targ: Vec<f64>,
    pub q_targ: Vec<f64>,
}

/// `[obs, goal, c_abs]`.
pub fn policy_input(obs: &[f64], goal: &[f64], c_abs: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + goal.len() + c_abs.len());
    x.extend_from_slice(obs);
    x.extend_from_slice(goal);
    x.extend_from_slice(c_abs);
    x
}

/// `[obs, clip(a), goal, f(s), c_init, c_abs]`.
pub fn q_input(obs: &[f64], a: &[f64], goal: &[f64], f_s: f64, init: &[f64], c_abs: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + a.len() + goal.len() + 1 + init.len() + c_abs.len());
    x.extend_from_slice(obs);
    x.extend(a.iter().map(|v| v.clamp(-1.0, 1.0)));
    x.extend_from_slice(goal);
    x.push(f_s);
    x.extend_from_slice(init);
    x.extend_from_slice(c_abs);
    x
}

pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), l)| {
            let z = (a - m) * libm::exp(-l);
            -0.5 * z * z - l - 0.5 * LN_2PI
        })
        .sum()
}

/// Per-episode curricula as plain values, handed from the outer loop to
/// the rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumBundle {
    /// One subgoal per episode segment; empty when subgoals are off.
    pub c_goal: Vec<[f64; 2]>,
    pub c_init: Option<Vec<f64>>,
    /// Reward Base-RNN parameters defining the potential.
    pub potential: Option<Vec<f64>>,
    /// Abstract curriculum; zeros when memory is off.
    pub c_abs: Vec<f64>,
}

impl CurriculumBundle {
    /// Goal slot for a step in `segment`, falling back to the task goal.
    pub fn goal_slot(&self, segment: usize, task_goal: &[f64]) -> Vec<f64> {
        match self.c_goal.get(segment) {
            Some(g) => g.to_vec(),
            None => task_goal.to_vec(),
        }
    }
}

/// `g(ε, A)`: `(1+ε)A` for `A ≥ 0`, `(1−ε)A` otherwise.
pub fn clip_g(eps: f64, a: f64) -> f64 {
    if a >= 0.0 {
        (1.0 + eps) * a
    } else {
        (1.0 - eps) * a
    }
}

/// Mean of `min(ratio·A, g(ε, A))`.
pub fn ppo_clip_objective(ratio: &[f64], adv: &[f64], eps: f64) -> f64 {
    assert_eq!(ratio.len(), adv.len());
    let s: f64 = ratio.iter().zip(adv).map(|(r, a)| (r * a).min(clip_g(eps, *a))).sum();
    s / ratio.len() as f64
}

/// One-step look-ahead from sampled target-network values:
/// `r` if terminal, else `r + λ·mean(q_j − coef·log π_j)`.
pub fn lookahead_target(r: f64, done: bool, lambda: f64, q: &[f64], log_pi: &[f64], coef: f64) -> f64 {
    if done {
        return r;
    }
    assert_eq!(q.len(), log_pi.len());
    assert!(!q.is_empty());
    let n = q.len() as f64;
    let e: f64 = q.iter().zip(log_pi).map(|(q, l)| q - coef * l).sum::<f64>() / n;
    r + lambda * e
}

/// `y⃛`: the look-ahead with the shaping term added to the reward.
pub fn shaped_lookahead_target(
    r: f64,
    shaping: f64,
    done: bool,
    lambda: f64,
    q: &[f64],
    log_pi: &[f64],
    coef: f64,
) -> f64 {
    lookahead_target(r + shaping, done, lambda, q, log_pi, coef)
}

/// Generalized advantage estimation. `next_values[t]` is V(s_{t+1}) (zero
/// for true terminals); `boundary[t]` cuts the trace after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    boundary: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        if boundary[t] {
            acc = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit standard deviation (population), in place.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var) + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub lr: f64,
    pub n_epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            n_epochs: 10,
            minibatch: 128,
            clip: 0.3,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 10.0,
            gamma: 0.9995,
            gae_lambda: 0.95,
        }
    }
}

/// On-policy data for one PPO update. Inputs are row-major, one row per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub x: Vec<f64>,
    pub actions: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.logp_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_old.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub updates: usize,
    pub skipped: usize,
    pub policy_objective: f64,
    pub value_loss: f64,
}

/// PPO loss `−clip_obj + vf·value_loss − ent·entropy` on a minibatch.
/// Returns `(loss, clip objective, value loss)` as tape scalars.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_tape<S: Real>(
    t: &mut Tape<S>,
    nets: &Networks,
    pi_vars: &[Var],
    log_std: Var,
    v_vars: &[Var],
    x: Var,
    actions: Var,
    logp_old: Var,
    adv: &[f64],
    returns: Var,
    cfg: &PpoConfig,
) -> (Var, Var, Var) {
    let b = adv.len();
    let act = nets.dims.act;
    let mean = nets.policy_mean_tape(t, pi_vars, x);
    let ls = t.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
    let diff = t.sub(actions, mean);
    let neg_ls = t.neg(ls);
    let inv_sd = t.exp(neg_ls);
    let z = t.mul_bcast(diff, inv_sd);
    let z2 = t.square(z);
    let quad = t.sum_cols(z2);
    let quad = t.scale(quad, -0.5);
    let ls_sum = t.sum(ls);
    let norm = t.scale(ls_sum, -1.0);
    let norm = t.add_const(norm, -0.5 * LN_2PI * act as f64);
    let logp = t.add_bcast(quad, norm);
    let dlogp = t.sub(logp, logp_old);
    let ratio = t.exp(dlogp);
    let a = t.constant_f64(b, 1, adv);
    let ga: Vec<f64> = adv.iter().map(|&v| clip_g(cfg.clip, v)).collect();
    let g = t.constant_f64(b, 1, &ga);
    let surr = t.mul(ratio, a);
    let clipped = t.min(surr, g);
    let obj = t.mean(clipped);
    let v = nets.value.forward(t, v_vars, x);
    let verr = t.sub(v, returns);
    let verr2 = t.square(verr);
    let vloss = t.mean(verr2);
    let pl = t.neg(obj);
    let vl = t.scale(vloss, cfg.vf_coef);
    let mut loss = t.add(pl, vl);
    if cfg.ent_coef != 0.0 {
        // Gaussian entropy: Σ log σ + const
        let ent = t.scale(ls_sum, -cfg.ent_coef);
        loss = t.add(loss, ent);
    }
    (loss, obj, vloss)
}

/// Clipped-surrogate PPO over `n_epochs` of shuffled minibatches. A single
/// Adam instance covers `[π; V]`. Minibatches with a non-finite gradient are
/// skipped. `after_step` runs after every applied minibatch step.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    nets: &Networks,
    pi: &mut [f64],
    v: &mut [f64],
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
    mut after_step: impl FnMut(&[f64]),
) -> PpoStats {
    let mut stats = PpoStats::default();
    let n = batch.len();
    if n == 0 {
        return stats;
    }
    let din = nets.dims.policy_input();
    let act = nets.dims.act;
    let n_pi_mlp = nets.policy.layout().len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mb = cfg.minibatch.max(1);
    let mut obj_sum = 0.0;
    let mut vl_sum = 0.0;
    for _ in 0..cfg.n_epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        for chunk in idx.chunks(mb) {
            let b = chunk.len();
            let mut xs = Vec::with_capacity(b * din);
            let mut acts = Vec::with_capacity(b * act);
            let mut lp = Vec::with_capacity(b);
            let mut adv = Vec::with_capacity(b);
            let mut ret = Vec::with_capacity(b);
            for &k in chunk {
                xs.extend_from_slice(&batch.x[k * din..(k + 1) * din]);
                acts.extend_from_slice(&batch.actions[k * act..(k + 1) * act]);
                lp.push(batch.logp_old[k]);
                adv.push(batch.advantages[k]);
                ret.push(batch.returns[k]);
            }
            let mut t = Tape::<f64>::new();
            let pv = nets.policy.layout().bind_f64(&mut t, &pi[..n_pi_mlp]);
            let ls = t.leaf(1, act, pi[n_pi_mlp..].to_vec());
            let vv = nets.value.layout().bind_f64(&mut t, v);
            let x = t.constant_f64(b, din, &xs);
            let a = t.constant_f64(b, act, &acts);
            let lpo = t.constant_f64(b, 1, &lp);
            let r = t.constant_f64(b, 1, &ret);
            let (loss, obj, vloss) = ppo_loss_tape(&mut t, nets, &pv, ls, &vv, x, a, lpo, &adv, r, cfg);
            let grads = t.backward(loss);
            let mut g = nets.policy.layout().collect(&grads, &pv);
            g.extend(grads.get_or_zero(ls));
            g.extend(nets.value.layout().collect(&grads, &vv));
            if !all_finite(&g) || !t.scalar(loss).is_finite() {
                log::warn!("non-finite PPO gradient; minibatch skipped");
                stats.skipped += 1;
                continue;
            }
            clip_grad_norm(&mut g, cfg.max_grad_norm);
            let mut flat: Vec<f64> = pi.iter().chain(v.iter()).copied().collect();
            opt.step(&mut flat, &g);
            let (p_new, v_new) = flat.split_at(pi.len());
            pi.copy_from_slice(p_new);
            v.copy_from_slice(v_new);
            obj_sum += t.scalar(obj);
            vl_sum += t.scalar(vloss);
            stats.updates += 1;
            after_step(pi);
        }
    }
    if stats.updates > 0 {
        stats.policy_objective = obj_sum / stats.updates as f64;
        stats.value_loss = vl_sum / stats.updates as f64;
    }
    stats
}

pub fn ppo_optimizer(nets: &Networks, cfg: &PpoConfig) -> Adam {
    Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        nets.policy_len() + nets.value.layout().len(),
    )
}

/// Conditioning slots of the Q head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Goal,
    Init,
    Reward,
    Abstract,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Goal, Slot::Init, Slot::Reward, Slot::Abstract];

    pub fn index(self) -> usize {
        match self {
            Slot::Goal => 0,
            Slot::Init => 1,
            Slot::Reward => 2,
            Slot::Abstract => 3,
        }
    }
}

/// Curricula on the tape, possibly depending on outer parameters.
#[derive(Clone, Debug, Default)]
pub struct CondVars {
    /// One 1×2 subgoal per segment.
    pub subgoals: Option<Vec<Var>>,
    /// 1×6.
    pub init: Option<Var>,
    pub reward: Option<BaseVars>,
    /// 1×M.
    pub c_abs: Option<Var>,
}

impl CondVars {
    pub fn has(&self, slot: Slot) -> bool {
        match slot {
            Slot::Goal => self.subgoals.is_some(),
            Slot::Init => self.init.is_some(),
            Slot::Reward => self.reward.is_some(),
            Slot::Abstract => self.c_abs.is_some(),
        }
    }
}

/// Which loss forms to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossForm {
    /// One residual with every available slot active, against `y⃛`.
    Combined,
    /// Sum of the per-slot losses.
    Sum,
}

/// Fixed data for one critic-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBatch {
    pub transitions: Vec<Transition>,
    /// `n_target × B × act` standard-normal draws for the target policy.
    pub noise: Vec<f64>,
    pub n_target: usize,
}

impl CriticBatch {
    pub fn new<R: Rng + ?Sized>(transitions: Vec<Transition>, n_target: usize, act: usize, rng: &mut R) -> Self {
        let noise = (0..n_target * transitions.len() * act)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            transitions,
            noise,
            n_target,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Constants shared by all look-ahead targets in one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetContext {
    pub pi_targ: Vec<f64>,
    pub q_targ: Vec<f64>,
    pub gamma: f64,
    pub mu: f64,
    pub shaping: ShapingMode,
    /// Frozen min/max of the shaping window (normalized mode).
    pub bounds: Option<(f64, f64)>,
    /// Weight of `−log π` inside the expectation.
    pub entropy_coef: f64,
}

/// Loss scalars (1×1 vars).
#[derive(Clone, Debug, Default)]
pub struct LossVars {
    /// Per-slot losses, by `Slot::index()`, present for available slots.
    pub components: [Option<Var>; 4],
    pub combined: Option<Var>,
    pub sum: Option<Var>,
}

impl LossVars {
    pub fn driving(&self, form: LossForm) -> Option<Var> {
        match form {
            LossForm::Combined => self.combined,
            LossForm::Sum => self.sum,
        }
    }
}

fn rows_const<S: Real>(t: &mut Tape<S>, batch: &CriticBatch, f: impl Fn(&Transition) -> Vec<f64>, cols: usize) -> Var {
    let mut v = Vec::with_capacity(batch.len() * cols);
    for tr in &batch.transitions {
        let r = f(tr);
        debug_assert_eq!(r.len(), cols);
        v.extend(r);
    }
    t.constant_f64(batch.len(), cols, &v)
}

fn broadcast_rows<S: Real>(t: &mut Tape<S>, row: Var, b: usize) -> Var {
    let (_, c) = t.shape(row);
    let z = t.constant(b, c, vec![S::zero(); b * c]);
    t.add_bcast(z, row)
}

/// Builds the requested curriculum losses. Q parameters are `q_vars`; the
/// target networks are constants from `tc`. The curricula in `cond` may be
/// functions of outer parameters, so gradients reach them through both the
/// Q inputs and the look-ahead targets.
#[allow(clippy::too_many_arguments)]
pub fn critic_losses<S: Real>(
    t: &mut Tape<S>,
    nets: &Networks,
    q_vars: &[Var],
    cond: &CondVars,
    batch: &CriticBatch,
    tc: &TargetContext,
    forms: &[LossForm],
    components: bool,
) -> Result<LossVars> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = nets.dims;
    let obs = rows_const(t, batch, |tr| tr.s.clone(), d.obs);
    let obs_next = rows_const(t, batch, |tr| tr.s_next.clone(), d.obs);
    let acts = rows_const(t, batch, |tr| tr.a.iter().map(|a| a.clamp(-1.0, 1.0)).collect(), d.act);
    let rewards = rows_const(t, batch, |tr| vec![tr.r], 1);
    let not_done = rows_const(t, batch, |tr| vec![if tr.done { 0.0 } else { 1.0 }], 1);
    let task_goal = rows_const(t, batch, |tr| tr.s[d.obs - d.goal..].to_vec(), d.goal);

    // full conditioning, used by the target policy
    let goal_full = match &cond.subgoals {
        Some(sg) => {
            let stack = t.concat_rows(sg);
            let n = sg.len();
            let sel = rows_const(
                t,
                batch,
                |tr| {
                    let mut oh = vec![0.0; n];
                    oh[tr.segment.min(n - 1)] = 1.0;
                    oh
                },
                n,
            );
            t.matmul(sel, stack)
        }
        None => task_goal,
    };
    let zeros_m = t.constant(b, d.mem, vec![S::zero(); b * d.mem]);
    let c_abs_full = match cond.c_abs {
        Some(c) => broadcast_rows(t, c, b),
        None => zeros_m,
    };
    let init_full = match cond.init {
        Some(i) => broadcast_rows(t, i, b),
        None => t.constant(b, d.init, vec![S::zero(); b * d.init]),
    };
    let zeros_1 = t.constant(b, 1, vec![S::zero(); b]);
    let (f_s, f_next) = match &cond.reward {
        Some(bv) => {
            let st = t.slice_cols(obs, 0, STATE_DIM);
            let stn = t.slice_cols(obs_next, 0, STATE_DIM);
            (potential_tape(t, bv, st), potential_tape(t, bv, stn))
        }
        None => (zeros_1, zeros_1),
    };
    let shaping = if cond.reward.is_some() {
        let fn_live = t.mul(f_next, not_done);
        let mf = t.scale(fn_live, tc.mu);
        let raw = t.sub(mf, f_s);
        Some(match tc.shaping {
            ShapingMode::Invariant => raw,
            ShapingMode::Normalized => match tc.bounds {
                Some((lo, hi)) if hi > lo => {
                    let shifted = t.add_const(raw, -lo);
                    let scaled = t.scale(shifted, 1.0 / (hi - lo));
                    t.clamp(scaled, 0.0, 1.0)
                }
                _ => t.constant(b, 1, vec![S::from_f64(0.5); b]),
            },
        })
    } else {
        None
    };

    // target policy samples a′ = μ(s′) + σ ε, shared by every loss
    let n_pi = nets.policy.layout().len();
    let pi_mlp = nets.policy.layout().bind_const(t, &tc.pi_targ[..n_pi]);
    let x_pi = t.concat_cols(&[obs_next, goal_full, c_abs_full]);
    let mean = nets.policy_mean_tape(t, &pi_mlp, x_pi);
    let ls: Vec<f64> = tc.pi_targ[n_pi..]
        .iter()
        .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    let sd: Vec<f64> = ls.iter().map(|l| libm::exp(*l)).collect();
    let sd_row = t.constant_f64(1, d.act, &sd);
    let nt = batch.n_target;
    let mut next_actions = Vec::with_capacity(nt);
    // mean over samples of −log π(a′), a constant under reparameterization
    let mut neg_logp = vec![0.0; b];
    for j in 0..nt {
        let eps = &batch.noise[j * b * d.act..(j + 1) * b * d.act];
        let e = t.constant_f64(b, d.act, eps);
        let step = t.mul_bcast(e, sd_row);
        let a = t.add(mean, step);
        next_actions.push(t.clamp(a, -1.0, 1.0));
        for i in 0..b {
            let mut lp = 0.0;
            for k in 0..d.act {
                let z = eps[i * d.act + k];
                lp += -0.5 * z * z - ls[k] - 0.5 * LN_2PI;
            }
            neg_logp[i] -= lp / nt as f64;
        }
    }
    let neg_logp = t.constant_f64(b, 1, &neg_logp);
    let entropy_term = t.scale(neg_logp, tc.entropy_coef);
    let q_targ_vars = nets.q.layout().bind_const(t, &tc.q_targ);

    // one Bellman residual for a given set of active slots
    let residual = |t: &mut Tape<S>, active: [bool; 4]| -> Var {
        let goal = if active[0] { goal_full } else { task_goal };
        let fs = if active[2] { f_s } else { zeros_1 };
        let fsn = if active[2] { f_next } else { zeros_1 };
        let init = if active[1] {
            init_full
        } else {
            t.constant(b, d.init, vec![S::zero(); b * d.init])
        };
        let cabs = if active[3] { c_abs_full } else { zeros_m };
        let xq = t.concat_cols(&[obs, acts, goal, fs, init, cabs]);
        let q = nets.q.forward(t, q_vars, xq);
        let mut xs = Vec::with_capacity(nt);
        for a in &next_actions {
            xs.push(t.concat_cols(&[obs_next, *a, goal, fsn, init, cabs]));
        }
        let xn = t.concat_rows(&xs);
        let qn = nets.q.forward(t, &q_targ_vars, xn);
        let mut qsum = t.slice_rows(qn, 0, b);
        for j in 1..nt {
            let part = t.slice_rows(qn, j * b, b);
            qsum = t.add(qsum, part);
        }
        let qmean = t.scale(qsum, 1.0 / nt as f64);
        let soft = t.add(qmean, entropy_term);
        let soft = t.mul(soft, not_done);
        let boot = t.scale(soft, tc.gamma);
        let mut y = t.add(rewards, boot);
        if active[2] {
            if let Some(sh) = shaping {
                y = t.add(y, sh);
            }
        }
        let err = t.sub(q, y);
        let sq = t.square(err);
        t.mean(sq)
    };

    let avail = Slot::ALL.map(|s| cond.has(s));
    let mut out = LossVars::default();
    if components || forms.contains(&LossForm::Sum) {
        let mut total: Option<Var> = None;
        for s in Slot::ALL {
            if !avail[s.index()] {
                continue;
            }
            let mut mask = [false; 4];
            mask[s.index()] = true;
            let l = residual(t, mask);
            out.components[s.index()] = Some(l);
            total = Some(match total {
                Some(x) => t.add(x, l),
                None => l,
            });
        }
        out.sum = Some(match total {
            Some(x) => x,
            // no curricula at all: the plain Bellman residual
            None => residual(t, [false; 4]),
        });
    }
    if forms.contains(&LossForm::Combined) {
        out.combined = Some(residual(t, avail));
    }
    Ok(out)
}
