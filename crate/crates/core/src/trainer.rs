//! The bilevel loop.
//!
//! Per outer episode:
//! 1. the outer model (Hyper-RNN, or directly owned Base-RNN parameters)
//!    generates the curricula and, if memory is on, performs the single
//!    memory write; `c_abs` is read from the written memory;
//! 2. the agent collects `n_steps` environment steps under those curricula
//!    (the rollout only ever sees the plain [`CurriculumBundle`]);
//! 3. Q takes `critic_steps` gradient steps on the curriculum loss; the last
//!    `unroll_k` of them are recorded as a differentiable trace;
//! 4. PPO updates π and V;
//! 5. the outer parameters take one SGD step on the hypergradient of
//!    `J_outer`, obtained by differentiating through the recorded critic
//!    steps with forward-over-reverse Hessian-vector products.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    critic_losses, gae, normalize, policy_input, ppo_optimizer, ppo_update, q_input, AgentDims, AgentParams,
    CondVars, CriticBatch, CurriculumBundle, LossForm, LossVars, Networks, PpoConfig, RolloutBatch, Slot,
    TargetContext,
};
use crate::buffer::{ReplayBuffer, Transition};
use crate::curricula::{
    init_state_tape, normalize_shaping, segment_of, subgoals_tape, PotentialFn, ShapingMode, ShapingNormalizer,
    SUBGOAL_SEGMENTS,
};
use crate::envs::{env_reset, env_step, sample_goal, sample_init_state, EnvSpec, Task, DONE_SUCCESS, STATE_DIM};
use crate::error::{Error, Result};
use crate::hypernet::{BaseShape, BaseVars, CellKind, HyperConfig, HyperNet, HyperState, Role, StateVars};
use crate::memory::{attend_tape, read_tape, write_tape, Attention, MemoryMatrix};
use crate::metrics::MetricsRecord;
use crate::nn::{Activation, Adam, AdamConfig, InnerOptimizer};
use crate::params::{all_finite, clip_grad_norm, l2_norm, polyak, Layout};
use crate::real::{Dual, Real};
use crate::rng::{stream, Stream, StreamRng};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Moc,
    MocBaseMinus,
    MocMemoryMinus,
    MocMemoryMinusHyperMinus,
    MocMemoryMinusGoalPlus,
    MocRandInitState,
    MocFixInitState,
    MocRandGoalState,
    Ppo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalSource {
    Generated,
    /// Uniform subgoals drawn per outer episode.
    Random,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitSource {
    Generated,
    /// One uniform initial state per outer episode.
    Random,
    /// One uniform initial state drawn per run.
    Fixed,
    /// The environment's own uniform reset.
    Env,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Moc,
        Variant::MocBaseMinus,
        Variant::MocMemoryMinus,
        Variant::MocMemoryMinusHyperMinus,
        Variant::MocMemoryMinusGoalPlus,
        Variant::MocRandInitState,
        Variant::MocFixInitState,
        Variant::MocRandGoalState,
        Variant::Ppo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Moc => "moc",
            Variant::MocBaseMinus => "moc_base_minus",
            Variant::MocMemoryMinus => "moc_memory_minus",
            Variant::MocMemoryMinusHyperMinus => "moc_memory_minus_hyper_minus",
            Variant::MocMemoryMinusGoalPlus => "moc_memory_minus_goal_plus",
            Variant::MocRandInitState => "moc_rand_init_state",
            Variant::MocFixInitState => "moc_fix_init_state",
            Variant::MocRandGoalState => "moc_rand_goal_state",
            Variant::Ppo => "ppo",
        }
    }

    /// Roles the Hyper-RNN steps through, or `None` without a Hyper-RNN.
    pub fn hyper_roles(self) -> Option<&'static [Role]> {
        use Role::*;
        match self {
            Variant::Moc => Some(&[Subgoal, Init, Reward, Memory]),
            Variant::MocBaseMinus => Some(&[Memory]),
            Variant::MocMemoryMinus => Some(&[Subgoal, Init, Reward]),
            Variant::MocMemoryMinusGoalPlus => Some(&[Subgoal]),
            Variant::MocRandInitState | Variant::MocFixInitState => Some(&[Subgoal, Reward, Memory]),
            Variant::MocRandGoalState => Some(&[Init, Reward, Memory]),
            Variant::MocMemoryMinusHyperMinus | Variant::Ppo => None,
        }
    }

    /// Base-RNNs that own their parameters (no Hyper-RNN).
    pub fn direct_roles(self) -> &'static [Role] {
        match self {
            Variant::MocMemoryMinusHyperMinus => &[Role::Subgoal, Role::Init, Role::Reward],
            _ => &[],
        }
    }

    pub fn uses_memory(self) -> bool {
        self.hyper_roles().is_some_and(|r| r.contains(&Role::Memory))
    }

    fn generates(self, role: Role) -> bool {
        self.hyper_roles().is_some_and(|r| r.contains(&role)) || self.direct_roles().contains(&role)
    }

    pub fn goal_source(self) -> GoalSource {
        match self {
            Variant::MocRandGoalState => GoalSource::Random,
            v if v.generates(Role::Subgoal) => GoalSource::Generated,
            _ => GoalSource::Off,
        }
    }

    pub fn init_source(self) -> InitSource {
        match self {
            Variant::MocRandInitState => InitSource::Random,
            Variant::MocFixInitState => InitSource::Fixed,
            v if v.generates(Role::Init) => InitSource::Generated,
            _ => InitSource::Env,
        }
    }

    pub fn shapes_reward(self) -> bool {
        self.generates(Role::Reward)
    }

    pub fn trains_q(self) -> bool {
        self != Variant::Ppo
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvantageMode {
    /// `Q − V` for curriculum variants, GAE for plain PPO.
    Auto,
    QMinusV,
    Gae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalSampling {
    PerOuterEpisode,
    PerEnvEpisode,
}

/// Every knob of a run. PPO defaults follow the reference hyperparameters where one is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    pub total_env_steps: u64,
    /// Outer episodes; 0 derives `ceil(total_env_steps / n_steps)`.
    pub outer_episodes: usize,
    /// Environment steps per outer episode (T_inner).
    pub n_steps: usize,
    pub ppo: PpoConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Initial log standard deviation of the Gaussian policy.
    pub init_log_std: f64,
    pub buffer_capacity: usize,
    /// Keep H_buf across outer episodes.
    pub persist_buffer: bool,
    pub hyper_hidden: usize,
    pub hyper_z: usize,
    pub hyper_cell: CellKind,
    pub base_hidden: usize,
    /// Reset the Hyper-RNN hidden state at every outer episode.
    pub reset_hyper_state: bool,
    pub mem_rows: usize,
    pub mem_cols: usize,
    /// Critic steps per outer episode; 0 means `n_steps / minibatch`.
    pub critic_steps: usize,
    pub critic_optimizer: CriticOptimizer,
    pub critic_lr: f64,
    pub critic_batch: usize,
    pub n_target: usize,
    pub tau: f64,
    pub target_entropy_coef: f64,
    pub unroll_k: usize,
    pub outer_lr: f64,
    pub first_order: bool,
    pub outer_batch: usize,
    pub outer_max_grad_norm: f64,
    pub loss_form: LossForm,
    pub shaping_mode: ShapingMode,
    pub shaping_window: usize,
    /// Shaping coefficient; `None` uses the discount.
    pub mu: Option<f64>,
    pub advantage: AdvantageMode,
    pub goal_sampling: GoalSampling,
    pub pretrain_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Reach,
            variant: Variant::Moc,
            seed: 0,
            total_env_steps: 200_000,
            outer_episodes: 0,
            n_steps: 5000,
            ppo: PpoConfig::default(),
            hidden: vec![64, 64],
            activation: Activation::Relu,
            init_log_std: 0.0,
            buffer_capacity: 1_000_000,
            persist_buffer: true,
            hyper_hidden: 32,
            hyper_z: 8,
            hyper_cell: CellKind::Lstm,
            base_hidden: 8,
            reset_hyper_state: false,
            mem_rows: 8,
            mem_cols: 16,
            critic_steps: 0,
            critic_optimizer: CriticOptimizer::Adam,
            critic_lr: 2.5e-4,
            critic_batch: 128,
            n_target: 4,
            tau: 0.005,
            target_entropy_coef: 1.0,
            unroll_k: 1,
            outer_lr: 1e-3,
            first_order: false,
            outer_batch: 128,
            outer_max_grad_norm: 10.0,
            loss_form: LossForm::Combined,
            shaping_mode: ShapingMode::Normalized,
            shaping_window: 10_000,
            mu: None,
            advantage: AdvantageMode::Auto,
            goal_sampling: GoalSampling::PerOuterEpisode,
            pretrain_episodes: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_outer_episodes(&self) -> usize {
        if self.outer_episodes > 0 {
            self.outer_episodes
        } else if self.n_steps == 0 {
            1
        } else {
            self.total_env_steps.div_ceil(self.n_steps as u64) as usize
        }
    }

    pub fn effective_critic_steps(&self) -> usize {
        if !self.variant.trains_q() || self.n_steps == 0 {
            0
        } else if self.critic_steps > 0 {
            self.critic_steps
        } else {
            (self.n_steps / self.ppo.minibatch.max(1)).max(1)
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(self.ppo.gamma)
    }

    pub fn uses_q_advantage(&self) -> bool {
        match self.advantage {
            AdvantageMode::Auto => self.variant.trains_q(),
            AdvantageMode::QMinusV => self.variant.trains_q(),
            AdvantageMode::Gae => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive");
        }
        if self.hyper_hidden == 0 || self.hyper_z == 0 || self.base_hidden == 0 {
            return bad("hyper-network sizes must be positive");
        }
        if self.mem_rows == 0 || self.mem_cols == 0 {
            return bad("memory must have at least one row and column");
        }
        if self.critic_batch == 0 || self.outer_batch == 0 || self.n_target == 0 || self.ppo.minibatch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.outer_lr >= 0.0) || !(self.critic_lr >= 0.0) || !(self.ppo.lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.ppo.gamma) || !(0.0..=1.0).contains(&self.ppo.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.shaping_window == 0 {
            return bad("shaping_window must be positive");
        }
        let inner = self.effective_critic_steps();
        if inner > 0 && !(1..=inner).contains(&self.unroll_k) {
            return Err(Error::Config(format!(
                "unroll_k must satisfy 1 <= unroll_k <= {inner} (critic steps per episode)"
            )));
        }
        EnvSpec::new(self.task).validate().map_err(Error::Config)
    }
}

/// Constant inputs of one episode's curriculum program.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInputs {
    pub hyper_state: HyperState,
    pub final_state: Vec<f64>,
    /// Memory before this episode's write.
    pub memory: Option<MemoryMatrix>,
    pub random_goals: Option<Vec<[f64; 2]>>,
    /// Initial state when it is not generated.
    pub given_init: Option<Vec<f64>>,
}

struct WriteVars {
    alpha: Var,
    m_e: Var,
    m_a: Var,
}

struct ProgramVars {
    cond: CondVars,
    hyper: Option<StateVars>,
    write: Option<WriteVars>,
}

#[derive(Clone, Debug)]
enum OuterModel {
    Hyper(HyperNet),
    /// Base-RNN parameters owned directly, one tensor per role.
    Direct { layout: Layout, shapes: [BaseShape; 3] },
    Off { layout: Layout },
}

impl OuterModel {
    fn layout(&self) -> &Layout {
        match self {
            OuterModel::Hyper(h) => h.layout(),
            OuterModel::Direct { layout, .. } => layout,
            OuterModel::Off { layout } => layout,
        }
    }
}

/// Critic state before one recorded inner step.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerStep {
    pub phi: Vec<f64>,
    pub grad: Vec<f64>,
    pub opt: InnerOptimizer,
    pub batch: CriticBatch,
    pub targets: TargetContext,
}

/// Everything needed to differentiate `J_outer` through the last critic steps.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerTrace {
    pub theta: Vec<f64>,
    pub inputs: EpisodeInputs,
    pub steps: Vec<InnerStep>,
    pub phi_final: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    pub j_outer: f64,
    /// Per-slot losses at φ_K, 0 where the slot is unavailable.
    pub components: [f64; 4],
}

/// Everything the harness may want to persist about an episode.
#[derive(Debug)]
pub struct EpisodeReport<'a> {
    pub metrics: &'a MetricsRecord,
    pub bundle: &'a CurriculumBundle,
    /// Agent positions after each step, starting at global step `first_step`.
    pub positions: &'a [[f64; 2]],
    pub first_step: u64,
    pub transitions: &'a [Transition],
    pub memory_writes_during_rollout: u64,
    pub memory_writes_this_episode: u64,
    pub mean_shaping: f64,
}

pub trait Observer {
    fn on_episode(&mut self, trainer: &Trainer, report: &EpisodeReport<'_>) -> core::result::Result<(), String>;
}

/// Discards every report.
pub struct NullObserver;

impl Observer for NullObserver {
    fn on_episode(&mut self, _: &Trainer, _: &EpisodeReport<'_>) -> core::result::Result<(), String> {
        Ok(())
    }
}

/// Outer parameters and memory carried over from pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub theta: Vec<f64>,
    pub memory: MemoryMatrix,
    pub hyper_state: HyperState,
}

/// Serializable trainer state for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub episode: usize,
    pub env_steps: u64,
    pub theta: Vec<f64>,
    pub outer_lr: f64,
    pub hyper_state: HyperState,
    pub memory: MemoryMatrix,
    pub agent: AgentParams,
    /// Optimizer moments, random-stream positions and shaping window. The
    /// replay buffer is not part of the snapshot.
    pub resume: ResumeState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub ppo_opt: Adam,
    pub q_opt: InnerOptimizer,
    pub final_state: Vec<f64>,
    pub normalizer: ShapingNormalizer,
    /// Word positions of the env, action, sampler, noise and curriculum streams.
    pub stream_positions: [u128; 5],
}

struct Rngs {
    env: StreamRng,
    action: StreamRng,
    sampler: StreamRng,
    noise: StreamRng,
    curriculum: StreamRng,
}

impl Rngs {
    fn positions(&self) -> [u128; 5] {
        [&self.env, &self.action, &self.sampler, &self.noise, &self.curriculum].map(|r| r.get_word_pos())
    }

    fn seek(&mut self, pos: &[u128; 5]) {
        let rs = [&mut self.env, &mut self.action, &mut self.sampler, &mut self.noise, &mut self.curriculum];
        for (r, &p) in rs.into_iter().zip(pos) {
            r.set_word_pos(p);
        }
    }
}

#[derive(Default)]
struct Rollout {
    transitions: Vec<Transition>,
    x: Vec<f64>,
    values: Vec<f64>,
    next_values: Vec<f64>,
    boundary: Vec<bool>,
    rewards: Vec<f64>,
    f_s: Vec<f64>,
    episode_returns: Vec<f64>,
    episode_success: Vec<f64>,
    partial: Option<(f64, f64)>,
    positions: Vec<[f64; 2]>,
    final_state: Option<Vec<f64>>,
    shaping_sum: f64,
}

struct RolloutCtx<'a> {
    spec: &'a EnvSpec,
    nets: &'a Networks,
    pi: &'a [f64],
    v: &'a [f64],
    bundle: &'a CurriculumBundle,
    potential: Option<&'a PotentialFn>,
    shaping_mode: ShapingMode,
    task_goal: Option<[f64; 2]>,
    n_steps: usize,
}

/// Runs the policy for `n_steps`. Takes the curricula as plain values only:
/// it has no access to the memory matrix or to outer parameters.
fn collect_rollout(
    ctx: &RolloutCtx<'_>,
    env_rng: &mut StreamRng,
    act_rng: &mut StreamRng,
    norm: &mut ShapingNormalizer,
) -> Rollout {
    let mut out = Rollout::default();
    if ctx.n_steps == 0 {
        return out;
    }
    let spec = ctx.spec;
    let nets = ctx.nets;
    let c_abs = &ctx.bundle.c_abs;
    let init = ctx.bundle.c_init.as_deref();
    let reset = |rng: &mut StreamRng| {
        let goal = ctx.task_goal.unwrap_or_else(|| sample_goal(spec, rng));
        env_reset(spec, init, Some(&goal), rng)
    };
    let (mut state, mut obs) = reset(env_rng);
    let mut ret = 0.0;
    let mut pending: Option<usize> = None;
    for i in 0..ctx.n_steps {
        let seg = segment_of(state.step_count, spec.max_steps);
        let goal = ctx.bundle.goal_slot(seg, &state.goal);
        let x = policy_input(&obs, &goal, c_abs);
        let v_s = nets.value_of(ctx.v, &x);
        if let Some(j) = pending.take() {
            out.next_values[j] = v_s;
        }
        let (a, lp) = nets.act(ctx.pi, &x, act_rng);
        let s_vec = state.state_vec();
        let res = env_step(spec, &state, &a);
        let terminal = res.done && res.fractional_success >= DONE_SUCCESS;
        let (shaping, f0) = match ctx.potential {
            Some(p) => {
                let f0 = p.value(&s_vec);
                let f1 = if terminal { 0.0 } else { p.value(&res.state.state_vec()) };
                let raw = p.mu * f1 - f0;
                let sh = match ctx.shaping_mode {
                    ShapingMode::Invariant => raw,
                    ShapingMode::Normalized => {
                        norm.observe(raw);
                        normalize_shaping(raw, norm.bounds())
                    }
                };
                (sh, f0)
            }
            None => (0.0, 0.0),
        };
        out.shaping_sum += shaping;
        out.positions.push(res.state.agent_pos);
        ret += res.reward;
        let last = i + 1 == ctx.n_steps;
        let boundary = res.done || last;
        let next_v = if terminal {
            0.0
        } else if boundary {
            let nseg = segment_of(res.state.step_count, spec.max_steps);
            let ng = ctx.bundle.goal_slot(nseg, &res.state.goal);
            nets.value_of(ctx.v, &policy_input(&res.observation, &ng, c_abs))
        } else {
            pending = Some(i);
            0.0
        };
        out.x.extend_from_slice(&x);
        out.values.push(v_s);
        out.next_values.push(next_v);
        out.boundary.push(boundary);
        out.rewards.push(res.reward + shaping);
        out.f_s.push(f0);
        out.transitions.push(Transition {
            s: obs.clone(),
            a,
            r: res.reward,
            s_next: res.observation.clone(),
            done: terminal,
            goal,
            c_abs: c_abs.clone(),
            log_prob: lp,
            shaped_r: res.reward + shaping,
            segment: seg,
        });
        out.final_state = Some(res.state.state_vec());
        if res.done {
            out.episode_returns.push(ret);
            out.episode_success.push(res.fractional_success);
            ret = 0.0;
            let (s, o) = reset(env_rng);
            state = s;
            obs = o;
        } else {
            if last {
                out.partial = Some((ret, res.fractional_success));
            }
            state = res.state;
            obs = res.observation;
        }
    }
    out
}

pub struct Trainer {
    cfg: TrainConfig,
    spec: EnvSpec,
    nets: Networks,
    params: AgentParams,
    ppo_opt: Adam,
    q_opt: InnerOptimizer,
    outer: OuterModel,
    theta: Vec<f64>,
    outer_lr: f64,
    hyper_state: HyperState,
    memory: MemoryMatrix,
    final_state: Vec<f64>,
    buffer: ReplayBuffer,
    normalizer: ShapingNormalizer,
    rngs: Rngs,
    fixed_init: Option<Vec<f64>>,
    episode: usize,
    env_steps: u64,
    last_trace: Option<InnerTrace>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec::new(cfg.task);
        let dims = AgentDims::point_mass(cfg.mem_cols);
        let nets = Networks::new(dims, &cfg.hidden, cfg.activation);
        let mut params = nets.init_params(&mut stream(cfg.seed, Stream::AgentInit));
        let n_mean = nets.policy_len() - nets.dims.act;
        for ls in params.pi[n_mean..].iter_mut().chain(params.pi_targ[n_mean..].iter_mut()) {
            *ls = cfg.init_log_std;
        }
        let hcfg = HyperConfig {
            state_dim: STATE_DIM,
            hidden: cfg.hyper_hidden,
            z_dim: cfg.hyper_z,
            cell: cfg.hyper_cell,
            base_hidden: cfg.base_hidden,
            base_input: STATE_DIM,
            base_outputs: [2, 4, 1],
            mem_cols: cfg.mem_cols,
        };
        let mut hrng = stream(cfg.seed, Stream::HypernetInit);
        let hyper = HyperNet::new(hcfg.clone());
        let h_theta = hyper.init(&mut hrng);
        let (outer, theta) = if cfg.variant.hyper_roles().is_some() {
            (OuterModel::Hyper(hyper), h_theta)
        } else if !cfg.variant.direct_roles().is_empty() {
            // start from what a freshly initialized Hyper-RNN would generate
            let out = hyper.generate_episode(&h_theta, &HyperState::zeros(cfg.hyper_hidden), &[0.0; STATE_DIM], &Role::BASE);
            let mut layout = Layout::new();
            let mut theta = Vec::new();
            for g in &out.generated {
                layout.push(g.role.name(), 1, g.theta_b.len());
                theta.extend_from_slice(&g.theta_b);
            }
            let shapes = Role::BASE.map(|r| hcfg.base_shape(r));
            (OuterModel::Direct { layout, shapes }, theta)
        } else {
            (OuterModel::Off { layout: Layout::new() }, Vec::new())
        };
        let memory = MemoryMatrix::init(cfg.mem_rows, cfg.mem_cols, &mut stream(cfg.seed, Stream::Memory));
        let mut curriculum = stream(cfg.seed, Stream::Curriculum);
        let fixed_init = (cfg.variant.init_source() == InitSource::Fixed).then(|| sample_init_state(&spec, &mut curriculum));
        let q_opt = match cfg.critic_optimizer {
            CriticOptimizer::Adam => InnerOptimizer::Adam(Adam::new(
                AdamConfig {
                    lr: cfg.critic_lr,
                    ..AdamConfig::default()
                },
                params.q.len(),
            )),
            CriticOptimizer::Sgd => InnerOptimizer::Sgd { lr: cfg.critic_lr },
        };
        Ok(Self {
            ppo_opt: ppo_optimizer(&nets, &cfg.ppo),
            q_opt,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.mem_cols),
            normalizer: ShapingNormalizer::new(cfg.shaping_window),
            rngs: Rngs {
                env: stream(cfg.seed, Stream::Env),
                action: stream(cfg.seed, Stream::Action),
                sampler: stream(cfg.seed, Stream::Sampler),
                noise: stream(cfg.seed, Stream::TargetNoise),
                curriculum,
            },
            hyper_state: HyperState::zeros(cfg.hyper_hidden),
            final_state: vec![0.0; STATE_DIM],
            outer_lr: cfg.outer_lr,
            spec,
            nets,
            params,
            outer,
            theta,
            memory,
            fixed_init,
            episode: 0,
            env_steps: 0,
            last_trace: None,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn agent_params(&self) -> &AgentParams {
        &self.params
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Named tensors of the outer parameter vector.
    pub fn theta_layout(&self) -> &Layout {
        self.outer.layout()
    }

    pub fn memory(&self) -> &MemoryMatrix {
        &self.memory
    }

    pub fn hyper_state(&self) -> &HyperState {
        &self.hyper_state
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn outer_lr(&self) -> f64 {
        self.outer_lr
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Trace recorded during the most recent episode's critic phase.
    pub fn last_trace(&self) -> Option<&InnerTrace> {
        self.last_trace.as_ref()
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            episode: self.episode,
            env_steps: self.env_steps,
            theta: self.theta.clone(),
            outer_lr: self.outer_lr,
            hyper_state: self.hyper_state.clone(),
            memory: self.memory.clone(),
            agent: self.params.clone(),
            resume: ResumeState {
                ppo_opt: self.ppo_opt.clone(),
                q_opt: self.q_opt.clone(),
                final_state: self.final_state.clone(),
                normalizer: self.normalizer.clone(),
                stream_positions: self.rngs.positions(),
            },
        }
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            theta: self.theta.clone(),
            memory: self.memory.clone(),
            hyper_state: self.hyper_state.clone(),
        }
    }

    /// Loads pretrained outer parameters and memory; refuses mismatched shapes.
    pub fn apply_warm_start(&mut self, ws: &WarmStart) -> Result<()> {
        if ws.theta.len() != self.theta.len() {
            return Err(Error::Manifest(format!(
                "outer parameter count {} does not match {}",
                ws.theta.len(),
                self.theta.len()
            )));
        }
        if (ws.memory.rows(), ws.memory.cols()) != (self.memory.rows(), self.memory.cols()) {
            return Err(Error::Manifest(format!(
                "memory shape {}x{} does not match {}x{}",
                ws.memory.rows(),
                ws.memory.cols(),
                self.memory.rows(),
                self.memory.cols()
            )));
        }
        if ws.hyper_state.h.len() != self.hyper_state.h.len() {
            return Err(Error::Manifest("Hyper-RNN hidden size mismatch".into()));
        }
        self.theta = ws.theta.clone();
        let mut memory = MemoryMatrix::from_data(ws.memory.rows(), ws.memory.cols(), ws.memory.data().to_vec());
        memory.set_m_a_prev(ws.memory.m_a_prev().to_vec());
        self.memory = memory;
        self.hyper_state = ws.hyper_state.clone();
        Ok(())
    }

    /// Restores a checkpointed state (shapes must match this config). The
    /// replay buffer restarts empty, so continuation is exact whenever the
    /// buffer is not carried across outer episodes.
    pub fn restore(&mut self, st: &TrainerState) -> Result<()> {
        self.apply_warm_start(&WarmStart {
            theta: st.theta.clone(),
            memory: st.memory.clone(),
            hyper_state: st.hyper_state.clone(),
        })?;
        let a = &st.agent;
        if a.pi.len() != self.params.pi.len() || a.v.len() != self.params.v.len() || a.q.len() != self.params.q.len() {
            return Err(Error::Manifest("agent network shapes differ".into()));
        }
        let r = &st.resume;
        if r.ppo_opt.m.len() != self.ppo_opt.m.len() || r.final_state.len() != self.final_state.len() {
            return Err(Error::Manifest("optimizer or final-state shapes differ".into()));
        }
        self.params = a.clone();
        self.ppo_opt = r.ppo_opt.clone();
        self.q_opt = r.q_opt.clone();
        self.final_state = r.final_state.clone();
        self.normalizer = r.normalizer.clone();
        self.rngs.seek(&r.stream_positions);
        self.buffer.clear();
        self.episode = st.episode;
        self.env_steps = st.env_steps;
        self.outer_lr = st.outer_lr;
        Ok(())
    }

    fn inner_form(&self) -> LossForm {
        match self.outer {
            OuterModel::Direct { .. } => LossForm::Sum,
            _ => self.cfg.loss_form,
        }
    }

    /// Draws this episode's constant curriculum inputs.
    pub fn episode_inputs(&mut self) -> EpisodeInputs {
        let v = self.cfg.variant;
        let w = self.spec.arena_half_width;
        let random_goals = (v.goal_source() == GoalSource::Random).then(|| {
            (0..SUBGOAL_SEGMENTS)
                .map(|_| [self.rngs.curriculum.random_range(-w..=w), self.rngs.curriculum.random_range(-w..=w)])
                .collect()
        });
        let given_init = match v.init_source() {
            InitSource::Random => Some(sample_init_state(&self.spec, &mut self.rngs.curriculum)),
            InitSource::Fixed => self.fixed_init.clone(),
            _ => None,
        };
        EpisodeInputs {
            hyper_state: self.hyper_state.clone(),
            final_state: self.final_state.clone(),
            memory: v.uses_memory().then(|| self.memory.clone()),
            random_goals,
            given_init,
        }
    }

    /// The curriculum program: outer parameters → conditioning on the tape.
    fn program<S: Real>(&self, t: &mut Tape<S>, theta: &[Var], inp: &EpisodeInputs) -> ProgramVars {
        let w = self.spec.arena_half_width;
        let ctx = t.constant_f64(1, STATE_DIM, &inp.final_state);
        let mut base: [Option<BaseVars>; 3] = [None; 3];
        let mut hyper = None;
        let mut mem_vecs = None;
        match &self.outer {
            OuterModel::Hyper(h) => {
                let roles = self.cfg.variant.hyper_roles().unwrap_or(&[]);
                let s = h.bind_state(t, &inp.hyper_state);
                let ep = h.run_episode(t, theta, s, ctx, roles);
                base = ep.base;
                hyper = Some(ep.state);
                mem_vecs = ep.memory;
            }
            OuterModel::Direct { shapes, .. } => {
                for (i, role) in Role::BASE.iter().enumerate() {
                    base[role.index()] = Some(BaseVars::from_flat(t, shapes[role.index()], theta[i]));
                }
            }
            OuterModel::Off { .. } => {}
        }
        let mut cond = CondVars::default();
        cond.subgoals = match (&inp.random_goals, base[Role::Subgoal.index()]) {
            (Some(g), _) => Some(g.iter().map(|g| t.constant_f64(1, 2, g)).collect()),
            (None, Some(bv)) => Some(subgoals_tape(t, &bv, ctx, SUBGOAL_SEGMENTS, w)),
            _ => None,
        };
        cond.init = match (&inp.given_init, base[Role::Init.index()]) {
            (Some(s), _) => Some(t.constant_f64(1, STATE_DIM, s)),
            (None, Some(bv)) => Some(init_state_tape(t, &bv, ctx, w)),
            _ => None,
        };
        cond.reward = base[Role::Reward.index()];
        let mut write = None;
        if let (Some(mem), Some((m_e, m_a))) = (&inp.memory, mem_vecs) {
            let m_old = t.constant_f64(mem.rows(), mem.cols(), mem.data());
            let alpha = attend_tape(t, m_old, m_a);
            let m_new = write_tape(t, m_old, alpha, m_e, m_a);
            // read keyed by the previous episode's add vector, on the
            // freshly written memory
            let key = t.constant_f64(1, mem.cols(), mem.m_a_prev());
            let alpha_r = attend_tape(t, m_new, key);
            cond.c_abs = Some(read_tape(t, alpha_r, m_new));
            write = Some(WriteVars { alpha, m_e, m_a });
        }
        ProgramVars { cond, hyper, write }
    }

    /// Evaluates the program at the current θ: curricula plus the pending
    /// Hyper-RNN state and memory write.
    fn generate(&self, inp: &EpisodeInputs) -> (CurriculumBundle, Option<HyperState>, Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
        let mut t = Tape::<f64>::new();
        let th = self.outer.layout().bind_const(&mut t, &self.theta);
        let pv = self.program(&mut t, &th, inp);
        let c = &pv.cond;
        let bundle = CurriculumBundle {
            c_goal: c
                .subgoals
                .as_ref()
                .map(|sg| {
                    sg.iter()
                        .map(|g| {
                            let v = t.values_f64(*g);
                            [v[0], v[1]]
                        })
                        .collect()
                })
                .unwrap_or_default(),
            c_init: c.init.map(|i| t.values_f64(i)),
            potential: c.reward.map(|bv| {
                let f = bv.flatten(&mut t);
                t.values_f64(f)
            }),
            c_abs: match c.c_abs {
                Some(v) => t.values_f64(v),
                None => vec![0.0; self.cfg.mem_cols],
            },
        };
        let hs = pv.hyper.map(|s| HyperState {
            h: t.values_f64(s.h),
            c: t.values_f64(s.c),
        });
        let write = pv
            .write
            .map(|w| (t.values_f64(w.alpha), t.values_f64(w.m_e), t.values_f64(w.m_a)));
        (bundle, hs, write)
    }

    /// Target networks and shaping settings as of now.
    pub fn target_context(&self, bounds: Option<(f64, f64)>) -> TargetContext {
        TargetContext {
            pi_targ: self.params.pi_targ.clone(),
            q_targ: self.params.q_targ.clone(),
            gamma: self.cfg.ppo.gamma,
            mu: self.cfg.mu(),
            shaping: self.cfg.shaping_mode,
            bounds,
            entropy_coef: self.cfg.target_entropy_coef,
        }
    }

    fn loss_tape<S: Real>(
        &self,
        t: &mut Tape<S>,
        theta: &[Var],
        q: &[Var],
        inp: &EpisodeInputs,
        batch: &CriticBatch,
        tc: &TargetContext,
        components: bool,
    ) -> Result<LossVars> {
        let pv = self.program(t, theta, inp);
        critic_losses(t, &self.nets, q, &pv.cond, batch, tc, &[self.inner_form()], components)
    }

    /// `(J, ∇_φ J)` of the driving loss at fixed θ.
    pub fn inner_gradient(
        &self,
        theta: &[f64],
        phi: &[f64],
        inp: &EpisodeInputs,
        batch: &CriticBatch,
        tc: &TargetContext,
    ) -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::<f64>::new();
        let th = self.outer.layout().bind_const(&mut t, theta);
        let q = self.nets.q.layout().bind_f64(&mut t, phi);
        let lv = self.loss_tape(&mut t, &th, &q, inp, batch, tc, false)?;
        let j = lv.driving(self.inner_form()).expect("driving loss built");
        let g = self.nets.q.layout().collect(&t.backward(j), &q);
        Ok((t.scalar(j), g))
    }

    /// `J_outer` at `(θ, φ)`.
    pub fn outer_loss(&self, theta: &[f64], phi: &[f64], inp: &EpisodeInputs, batch: &CriticBatch, tc: &TargetContext) -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let th = self.outer.layout().bind_const(&mut t, theta);
        let q = self.nets.q.layout().bind_const(&mut t, phi);
        let lv = self.loss_tape(&mut t, &th, &q, inp, batch, tc, false)?;
        Ok(t.scalar(lv.driving(self.inner_form()).expect("driving loss built")))
    }

    /// Replays the traced critic steps from their starting φ with outer
    /// parameters `theta`, then evaluates `J_outer`. This is the two-level
    /// function whose gradient [`Trainer::hypergradient`] returns.
    pub fn unrolled_outer_loss(&self, theta: &[f64], trace: &InnerTrace, outer: &CriticBatch, tc: &TargetContext) -> Result<f64> {
        let mut phi = trace.steps.first().map_or_else(|| trace.phi_final.clone(), |s| s.phi.clone());
        for step in &trace.steps {
            let (_, g) = self.inner_gradient(theta, &phi, &trace.inputs, &step.batch, &step.targets)?;
            let mut opt = step.opt.clone();
            opt.step(&mut phi, &g);
        }
        self.outer_loss(theta, &phi, &trace.inputs, outer, tc)
    }

    /// `∇_θ J_outer(φ_K(θ), θ)` through the traced critic steps. With
    /// `first_order` only the direct term is kept.
    pub fn hypergradient(&self, trace: &InnerTrace, outer: &CriticBatch, tc: &TargetContext) -> Result<Hypergradient> {
        let form = self.inner_form();
        let tl = self.outer.layout();
        let ql = self.nets.q.layout();
        let mut t = Tape::<f64>::new();
        let th = tl.bind_f64(&mut t, &trace.theta);
        let q = ql.bind_f64(&mut t, &trace.phi_final);
        let lv = self.loss_tape(&mut t, &th, &q, &trace.inputs, outer, tc, true)?;
        let j = lv.driving(form).expect("driving loss built");
        let grads = t.backward(j);
        let mut g_theta = tl.collect(&grads, &th);
        let mut v = ql.collect(&grads, &q);
        let mut components = [0.0; 4];
        for s in Slot::ALL {
            if let Some(c) = lv.components[s.index()] {
                components[s.index()] = t.scalar(c);
            }
        }
        if !self.cfg.first_order {
            for step in trace.steps.iter().rev() {
                let d = step.opt.step_jacobian_diag(&step.grad);
                let w: Vec<f64> = d.iter().zip(&v).map(|(d, v)| d * v).collect();
                let mut td = Tape::<Dual>::new();
                let thd: Vec<Dual> = trace.theta.iter().map(|&x| Dual::new(x, 0.0)).collect();
                let phd: Vec<Dual> = step.phi.iter().zip(&w).map(|(&p, &w)| Dual::new(p, w)).collect();
                let thv = tl.bind(&mut td, &thd);
                let qv = ql.bind(&mut td, &phd);
                let lv = self.loss_tape(&mut td, &thv, &qv, &trace.inputs, &step.batch, &step.targets, false)?;
                let jd = lv.driving(form).expect("driving loss built");
                let gd = td.backward(jd);
                for (acc, g) in g_theta.iter_mut().zip(tl.collect(&gd, &thv)) {
                    *acc += g.d;
                }
                for (acc, g) in v.iter_mut().zip(ql.collect(&gd, &qv)) {
                    *acc += g.d;
                }
            }
        }
        Ok(Hypergradient {
            grad: g_theta,
            j_outer: t.scalar(j),
            components,
        })
    }

    /// Draws a critic batch from H_buf with fresh target noise.
    pub fn sample_batch(&mut self, n: usize) -> Result<CriticBatch> {
        let idx = self.buffer.sample_indices(n, &mut self.rngs.sampler, false)?;
        let trs: Vec<Transition> = idx.iter().map(|&i| self.buffer.get(i).expect("index in range").clone()).collect();
        Ok(CriticBatch::new(trs, self.cfg.n_target, self.nets.dims.act, &mut self.rngs.noise))
    }

    pub fn outer_episodes(&self) -> usize {
        self.cfg.effective_outer_episodes()
    }

    /// Runs one outer episode and returns its metrics.
    pub fn run_episode(&mut self, obs: &mut dyn Observer) -> Result<MetricsRecord> {
        let v = self.cfg.variant;
        let writes_start = self.memory.writes();
        let inputs = self.episode_inputs();
        let (bundle, new_state, write) = self.generate(&inputs);
        if let Some((alpha, m_e, m_a)) = write {
            self.memory.write_with(&Attention { alpha }, &m_e, &m_a);
        }
        if let Some(h) = new_state {
            self.hyper_state = if self.cfg.reset_hyper_state {
                HyperState::zeros(self.cfg.hyper_hidden)
            } else {
                h
            };
        }
        let potential = bundle
            .potential
            .as_ref()
            .map(|p| PotentialFn::new(self.outer_base_shape(Role::Reward), p.clone(), self.cfg.mu()));
        let task_goal = match self.cfg.goal_sampling {
            GoalSampling::PerOuterEpisode => Some(sample_goal(&self.spec, &mut self.rngs.env)),
            GoalSampling::PerEnvEpisode => None,
        };

        // rollout
        let writes_before_rollout = self.memory.writes();
        let ctx = RolloutCtx {
            spec: &self.spec,
            nets: &self.nets,
            pi: &self.params.pi,
            v: &self.params.v,
            bundle: &bundle,
            potential: potential.as_ref(),
            shaping_mode: self.cfg.shaping_mode,
            task_goal,
            n_steps: self.cfg.n_steps,
        };
        let roll = collect_rollout(&ctx, &mut self.rngs.env, &mut self.rngs.action, &mut self.normalizer);
        let writes_during_rollout = self.memory.writes() - writes_before_rollout;
        let first_step = self.env_steps;
        self.env_steps += roll.transitions.len() as u64;
        if let Some(fs) = &roll.final_state {
            self.final_state = fs.clone();
        }
        if !self.cfg.persist_buffer {
            self.buffer.clear();
        }
        if v.trains_q() {
            for tr in &roll.transitions {
                self.buffer.push(tr.clone())?;
            }
        }

        // critic steps
        let bounds = match self.cfg.shaping_mode {
            ShapingMode::Normalized => self.normalizer.bounds(),
            ShapingMode::Invariant => None,
        };
        let mut steps: VecDeque<InnerStep> = VecDeque::new();
        if !self.buffer.is_empty() {
            for _ in 0..self.cfg.effective_critic_steps() {
                let batch = self.sample_batch(self.cfg.critic_batch)?;
                let tc = self.target_context(bounds);
                let (_, g) = self.inner_gradient(&self.theta, &self.params.q, &inputs, &batch, &tc)?;
                if !all_finite(&g) {
                    log::warn!("non-finite critic gradient; step skipped");
                    continue;
                }
                if self.cfg.unroll_k > 0 {
                    steps.push_back(InnerStep {
                        phi: self.params.q.clone(),
                        grad: g.clone(),
                        opt: self.q_opt.clone(),
                        batch,
                        targets: tc,
                    });
                    if steps.len() > self.cfg.unroll_k {
                        steps.pop_front();
                    }
                }
                self.q_opt.step(&mut self.params.q, &g);
                polyak(&mut self.params.q_targ, &self.params.q, self.cfg.tau);
            }
        }

        // PPO
        if !roll.transitions.is_empty() {
            let (mut adv, ret) = gae(
                &roll.rewards,
                &roll.values,
                &roll.next_values,
                &roll.boundary,
                self.cfg.ppo.gamma,
                self.cfg.ppo.gae_lambda,
            );
            if self.cfg.uses_q_advantage() {
                let zeros_init = vec![0.0; STATE_DIM];
                let init = bundle.c_init.as_deref().unwrap_or(&zeros_init);
                for (i, tr) in roll.transitions.iter().enumerate() {
                    let xq = q_input(&tr.s, &tr.a, &tr.goal, roll.f_s[i], init, &bundle.c_abs);
                    adv[i] = self.nets.q_of(&self.params.q, &xq) - roll.values[i];
                }
            }
            normalize(&mut adv);
            let batch = RolloutBatch {
                x: roll.x.clone(),
                actions: roll.transitions.iter().flat_map(|t| t.a.iter().copied()).collect(),
                logp_old: roll.transitions.iter().map(|t| t.log_prob).collect(),
                advantages: adv,
                returns: ret,
            };
            let tau = self.cfg.tau;
            let pi_targ = &mut self.params.pi_targ;
            ppo_update(
                &self.nets,
                &mut self.params.pi,
                &mut self.params.v,
                &mut self.ppo_opt,
                &batch,
                &self.cfg.ppo,
                &mut self.rngs.action,
                |pi| polyak(pi_targ, pi, tau),
            );
        }

        // outer step
        let mut rec = MetricsRecord {
            episode: self.episode,
            env_steps: self.env_steps,
            ..MetricsRecord::default()
        };
        let (rew, succ) = if !roll.episode_returns.is_empty() {
            (crate::metrics::mean(&roll.episode_returns), crate::metrics::mean(&roll.episode_success))
        } else {
            roll.partial.unwrap_or((0.0, 0.0))
        };
        rec.mean_episode_reward = rew;
        rec.fractional_success = succ;
        self.last_trace = None;
        if v.trains_q() && !self.buffer.is_empty() && !self.theta.is_empty() {
            let outer = self.sample_batch(self.cfg.outer_batch)?;
            let tc = self.target_context(bounds);
            let trace = InnerTrace {
                theta: self.theta.clone(),
                inputs,
                steps: steps.into_iter().collect(),
                phi_final: self.params.q.clone(),
            };
            let hg = self.hypergradient(&trace, &outer, &tc)?;
            let mut g = hg.grad;
            let norm = l2_norm(&g);
            rec.hypergrad_norm = norm;
            rec.j_outer = hg.j_outer;
            rec.j_goal = hg.components[Slot::Goal.index()];
            rec.j_init = hg.components[Slot::Init.index()];
            rec.j_reward = hg.components[Slot::Reward.index()];
            rec.j_abstract = hg.components[Slot::Abstract.index()];
            if norm.is_finite() && all_finite(&g) {
                clip_grad_norm(&mut g, self.cfg.outer_max_grad_norm);
                for (th, gi) in self.theta.iter_mut().zip(&g) {
                    *th -= self.outer_lr * gi;
                }
            } else {
                self.outer_lr *= 0.5;
                log::warn!("non-finite hypergradient; outer step skipped, outer_lr now {}", self.outer_lr);
            }
            self.last_trace = Some(trace);
        }

        let n = roll.transitions.len().max(1) as f64;
        let report = EpisodeReport {
            metrics: &rec,
            bundle: &bundle,
            positions: &roll.positions,
            first_step,
            transitions: &roll.transitions,
            memory_writes_during_rollout: writes_during_rollout,
            memory_writes_this_episode: self.memory.writes() - writes_start,
            mean_shaping: roll.shaping_sum / n,
        };
        obs.on_episode(self, &report).map_err(Error::Observer)?;
        self.episode += 1;
        Ok(rec)
    }

    fn outer_base_shape(&self, role: Role) -> BaseShape {
        match &self.outer {
            OuterModel::Hyper(h) => h.config().base_shape(role),
            OuterModel::Direct { shapes, .. } => shapes[role.index()],
            OuterModel::Off { .. } => unreachable!("no Base-RNNs without an outer model"),
        }
    }

    /// Runs all remaining outer episodes.
    pub fn train(&mut self, obs: &mut dyn Observer) -> Result<Vec<MetricsRecord>> {
        let total = self.outer_episodes();
        let mut out = Vec::with_capacity(total.saturating_sub(self.episode));
        while self.episode < total {
            out.push(self.run_episode(obs)?);
        }
        Ok(out)
    }
}

/// Trains on the partner task for `pretrain_episodes` and returns the
/// outer parameters and memory for warm-starting.
pub fn pretrain(cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<WarmStart> {
    let mut pc = cfg.clone();
    pc.task = cfg.task.pretraining_partner();
    let mut tr = Trainer::new(pc)?;
    for _ in 0..cfg.pretrain_episodes {
        tr.run_episode(obs)?;
    }
    Ok(tr.warm_start())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            n_steps: 64,
            outer_episodes: 2,
            hidden: vec![8],
            hyper_hidden: 4,
            hyper_z: 3,
            base_hidden: 4,
            mem_rows: 3,
            mem_cols: 4,
            critic_batch: 16,
            outer_batch: 16,
            ppo: PpoConfig {
                minibatch: 32,
                n_epochs: 2,
                ..PpoConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let mut tr = Trainer::new(tiny(v)).unwrap();
            let recs = tr.train(&mut NullObserver).unwrap();
            assert_eq!(recs.len(), 2, "{v}");
            let writes = if v.uses_memory() { 2 } else { 0 };
            assert_eq!(tr.memory().writes(), writes, "{v}");
            for r in &recs {
                assert!(r.values().iter().all(|x| x.is_finite()), "{v}: {r:?}");
            }
        }
    }

    #[test]
    fn zero_inner_steps_changes_no_agent_parameters() {
        let mut cfg = tiny(Variant::Moc);
        cfg.n_steps = 0;
        cfg.outer_episodes = 1;
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.agent_params().clone();
        tr.train(&mut NullObserver).unwrap();
        assert_eq!(tr.agent_params(), &before);
        assert_eq!(tr.memory().writes(), 1);
        assert_eq!(tr.episode(), 1);
    }

    #[test]
    fn generation_is_reproducible() {
        let mut tr = Trainer::new(tiny(Variant::Moc)).unwrap();
        let inp = tr.episode_inputs();
        let a = tr.generate(&inp);
        let b = tr.generate(&inp);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn first_order_equals_direct_term() {
        let mut cfg = tiny(Variant::Moc);
        cfg.first_order = true;
        cfg.critic_optimizer = CriticOptimizer::Sgd;
        cfg.shaping_mode = ShapingMode::Invariant;
        let mut tr = Trainer::new(cfg).unwrap();
        tr.run_episode(&mut NullObserver).unwrap();
        let trace = tr.last_trace().unwrap().clone();
        let outer = tr.sample_batch(8).unwrap();
        let tc = tr.target_context(None);
        let hg = tr.hypergradient(&trace, &outer, &tc).unwrap();
        // direct gradient by finite differences at fixed φ_K
        let th = trace.theta.clone();
        for i in (0..th.len()).step_by(17) {
            let h = 1e-5;
            let mut p = th.clone();
            p[i] += h;
            let up = tr.outer_loss(&p, &trace.phi_final, &trace.inputs, &outer, &tc).unwrap();
            p[i] -= 2.0 * h;
            let dn = tr.outer_loss(&p, &trace.phi_final, &trace.inputs, &outer, &tc).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - hg.grad[i]).abs() <= 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", hg.grad[i]);
        }
    }

    #[test]
    fn zero_outer_lr_keeps_theta() {
        let mut cfg = tiny(Variant::Moc);
        cfg.outer_lr = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let th = tr.theta().to_vec();
        tr.train(&mut NullObserver).unwrap();
        assert_eq!(tr.theta(), &th[..]);
    }

    #[test]
    fn pretrain_zero_episodes_is_random_init() {
        let mut cfg = tiny(Variant::Moc);
        cfg.pretrain_episodes = 0;
        let ws = pretrain(&cfg, &mut NullObserver).unwrap();
        let fresh = Trainer::new(cfg.clone()).unwrap();
        assert_eq!(ws, fresh.warm_start());
        let mut target = Trainer::new(cfg).unwrap();
        target.apply_warm_start(&ws).unwrap();
    }

    #[test]
    fn warm_start_rejects_mismatched_manifest() {
        let ws = Trainer::new(tiny(Variant::Moc)).unwrap().warm_start();
        let mut other = tiny(Variant::Moc);
        other.hyper_hidden = 5;
        let mut tr = Trainer::new(other).unwrap();
        assert!(matches!(tr.apply_warm_start(&ws), Err(Error::Manifest(_))));
    }

    #[test]
    fn invalid_unroll_is_rejected() {
        let mut cfg = tiny(Variant::Moc);
        cfg.unroll_k = 10;
        assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
    }
}
