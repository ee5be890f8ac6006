//! Per-agent learning stack: observation encoder, DDPG actor and critic,
//! replay buffer, and the decentralized update.
//!
//! An update for agent `i` rebuilds `i`'s communication flow from the stored
//! recurrent states. Peer cells and peer encodings enter that flow as
//! constants, so only agent `i`'s encoder, cell, actor and critic move.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bind, collect_grads, Graph, Module, NodeId, Parameter};
use crate::cell::{CellConfig, CellNodes, CellParams, CellState, CommVector, HiddenState};
use crate::envs::Action;
use crate::error::{contract, Error, Result};
use crate::flow::{build_plan, flow_graph, AgentId, CommPlan, FlowInputs};
use crate::math;
use crate::matrix::Matrix;

pub const ACT_DIM: usize = 2;

/// What the actor and critic read besides the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInput {
    MessageOnly,
    #[default]
    StateAndMessage,
}

/// Network shapes and switches shared by every agent of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of encodings, memories and messages.
    pub d: usize,
    pub obs_dim: usize,
    /// Width of each of the two critic encodings.
    pub critic_width: usize,
    /// Mix the two critic encodings through a hidden layer before the
    /// output. Without it Q is a sum of a state term and an action term, so
    /// the greedy action cannot depend on the state.
    pub critic_joint: bool,
    pub cell: CellConfig,
    pub policy_input: PolicyInput,
    /// Bias vectors on encoder, actor and critic layers.
    pub bias: bool,
    /// When false the message is fixed at zero and no cell is used.
    pub communicate: bool,
    /// Let the owner's loss train peer cells met during the relay.
    pub relay_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            obs_dim: 0,
            critic_width: 64,
            critic_joint: true,
            cell: CellConfig::default(),
            policy_input: PolicyInput::default(),
            bias: false,
            communicate: true,
            relay_grad: false,
        }
    }
}

impl ModelConfig {
    fn policy_width(&self) -> usize {
        match self.policy_input {
            PolicyInput::MessageOnly => self.d,
            PolicyInput::StateAndMessage => 2 * self.d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    /// Soft target update rate.
    pub tau: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Fraction of training over which noise decays linearly.
    pub noise_decay_fraction: f64,
    pub buffer_capacity: usize,
    /// Global gradient-norm clip per module.
    pub grad_clip: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.001,
            gamma: 0.99,
            batch: 128,
            tau: 0.01,
            noise_start: 0.3,
            noise_end: 0.05,
            noise_decay_fraction: 0.5,
            buffer_capacity: 50_000,
            grad_clip: Some(0.5),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(contract(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(contract(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return Err(contract("batch and buffer capacity must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        Ok(())
    }

    /// Exploration scale after `progress` (0 at start, 1 at end of training).
    pub fn noise_sigma(&self, progress: f64) -> f64 {
        let span = self.noise_decay_fraction.max(f64::MIN_POSITIVE);
        let t = (progress / span).clamp(0.0, 1.0);
        self.noise_start * (1.0 - t) + self.noise_end * t
    }
}

/// Dense layer `W x (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(id: &str, out: usize, inp: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / math::sqrt(inp.max(1) as f64);
        let data = (0..out * inp).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            w: Parameter::new(format!("{id}/w"), Matrix::from_vec(out, inp, data)?),
            b: bias.then(|| Parameter::new(format!("{id}/b"), Matrix::zeros(out, 1))),
        })
    }

    pub fn zeros(id: &str, out: usize, inp: usize) -> Self {
        Self {
            w: Parameter::new(format!("{id}/w"), Matrix::zeros(out, inp)),
            b: None,
        }
    }

    fn apply(g: &mut Graph, nodes: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = g.matmul(nodes[0], x)?;
        match nodes.get(1) {
            Some(&b) => g.add_column(y, b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        core::iter::once(&self.w).chain(self.b.as_ref()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        core::iter::once(&mut self.w).chain(self.b.as_mut()).collect()
    }
}

/// `s = leaky_relu(W_e o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams(pub Linear);

/// `a = tanh(W_act [s, h])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorParams(pub Linear);

/// `Q = W_out [leaky_relu(W_msg [s, h]), leaky_relu(W_act a)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub msg: Linear,
    pub act: Linear,
    /// Optional mixing layer over the concatenated encodings.
    pub joint: Option<Linear>,
    pub out: Linear,
}

macro_rules! delegate_module {
    ($t:ty) => {
        impl Module for $t {
            fn parameters(&self) -> Vec<&Parameter> {
                self.0.parameters()
            }
            fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
                self.0.parameters_mut()
            }
        }
    };
}
delegate_module!(EncoderParams);
delegate_module!(ActorParams);

impl Module for CriticParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.msg.parameters();
        v.extend(self.act.parameters());
        if let Some(j) = &self.joint {
            v.extend(j.parameters());
        }
        v.extend(self.out.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.msg.parameters_mut();
        v.extend(self.act.parameters_mut());
        if let Some(j) = &mut self.joint {
            v.extend(j.parameters_mut());
        }
        v.extend(self.out.parameters_mut());
        v
    }
}

/// Bound critic leaves, one node list per layer.
#[derive(Debug, Clone)]
pub struct CriticNodes {
    msg: Vec<NodeId>,
    act: Vec<NodeId>,
    joint: Vec<NodeId>,
    out: Vec<NodeId>,
}

impl CriticNodes {
    /// Leaves in [`Module::parameters`] order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.msg.iter().chain(&self.act).chain(&self.joint).chain(&self.out).copied().collect()
    }
}

impl CriticParams {
    pub fn bind(&self, g: &mut Graph, live: bool) -> CriticNodes {
        CriticNodes {
            msg: bind(g, &self.msg, live),
            act: bind(g, &self.act, live),
            joint: self.joint.as_ref().map(|j| bind(g, j, live)).unwrap_or_default(),
            out: bind(g, &self.out, live),
        }
    }

    pub fn collect(&mut self, g: &Graph, nodes: &CriticNodes) {
        collect_grads(g, &nodes.msg, &mut self.msg);
        collect_grads(g, &nodes.act, &mut self.act);
        if let Some(j) = &mut self.joint {
            collect_grads(g, &nodes.joint, j);
        }
        collect_grads(g, &nodes.out, &mut self.out);
    }
}

pub fn encoder_graph(g: &mut Graph, nodes: &[NodeId], obs: NodeId) -> Result<NodeId> {
    let y = Linear::apply(g, nodes, obs)?;
    Ok(g.leaky_relu(y))
}

pub fn policy_input_graph(g: &mut Graph, cfg: &ModelConfig, s: NodeId, h: NodeId) -> Result<NodeId> {
    match cfg.policy_input {
        PolicyInput::MessageOnly => Ok(h),
        PolicyInput::StateAndMessage => g.concat(s, h),
    }
}

pub fn actor_graph(g: &mut Graph, nodes: &[NodeId], input: NodeId) -> Result<NodeId> {
    let y = Linear::apply(g, nodes, input)?;
    Ok(g.tanh(y))
}

pub fn critic_graph(g: &mut Graph, nodes: &CriticNodes, input: NodeId, action: NodeId) -> Result<NodeId> {
    let m = Linear::apply(g, &nodes.msg, input)?;
    let m = g.leaky_relu(m);
    let a = Linear::apply(g, &nodes.act, action)?;
    let a = g.leaky_relu(a);
    let mut both = g.concat(m, a)?;
    if !nodes.joint.is_empty() {
        let j = Linear::apply(g, &nodes.joint, both)?;
        both = g.leaky_relu(j);
    }
    Linear::apply(g, &nodes.out, both)
}

/// Everything one agent learns.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModules {
    pub encoder: EncoderParams,
    pub cell: CellParams,
    pub actor: ActorParams,
    pub critic: CriticParams,
}

impl AgentModules {
    pub fn init<R: Rng + ?Sized>(prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.d == 0 || cfg.obs_dim == 0 {
            return Err(contract("model widths must be positive"));
        }
        let encoder = EncoderParams(Linear::init(&format!("{prefix}/encoder"), cfg.d, cfg.obs_dim, cfg.bias, rng)?);
        let cell = CellParams::init(&format!("{prefix}/cell"), cfg.d, cfg.cell.bias, rng)?;
        let pw = cfg.policy_width();
        let actor = ActorParams(Linear::init(&format!("{prefix}/actor"), ACT_DIM, pw, cfg.bias, rng)?);
        let cw = cfg.critic_width;
        let critic = CriticParams {
            msg: Linear::init(&format!("{prefix}/critic/msg"), cw, pw, cfg.bias, rng)?,
            act: Linear::init(&format!("{prefix}/critic/act"), cw, ACT_DIM, cfg.bias, rng)?,
            joint: match cfg.critic_joint {
                true => Some(Linear::init(&format!("{prefix}/critic/joint"), cw, 2 * cw, cfg.bias, rng)?),
                false => None,
            },
            out: Linear::init(&format!("{prefix}/critic/out"), 1, if cfg.critic_joint { cw } else { 2 * cw }, cfg.bias, rng)?,
        };
        Ok(Self {
            encoder,
            cell,
            actor,
            critic,
        })
    }

    /// Copy with every parameter id's leading `from` replaced by `to`.
    pub fn renamed(&self, from: &str, to: &str) -> Self {
        let mut out = self.clone();
        for p in out.parameters_mut() {
            if let Some(rest) = p.id().strip_prefix(from) {
                let id = format!("{to}{rest}");
                let trainable = p.trainable;
                *p = Parameter::new(id, p.value.clone());
                p.trainable = trainable;
            }
        }
        out
    }
}

impl Module for AgentModules {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.parameters();
        v.extend(self.cell.parameters());
        v.extend(self.actor.parameters());
        v.extend(self.critic.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.parameters_mut();
        v.extend(self.cell.parameters_mut());
        v.extend(self.actor.parameters_mut());
        v.extend(self.critic.parameters_mut());
        v
    }
}

/// Adam over one module's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new<M: Module + ?Sized>(module: &M, lr: f64) -> Self {
        let zeros: Vec<Matrix> = module
            .parameters()
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one step from the accumulated gradients, then zeroes them.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, clip: Option<f64>) {
        let mut params = module.parameters_mut();
        let scale = match clip {
            Some(max) => {
                let norm = math::sqrt(
                    params
                        .iter()
                        .filter(|p| p.trainable)
                        .flat_map(|p| p.grad.as_slice())
                        .map(|g| g * g)
                        .sum(),
                );
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (k, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            let grads = p.grad.as_slice().to_vec();
            for (((w, g), mk), vk) in p.value.as_mut_slice().iter_mut().zip(grads).zip(m).zip(v) {
                let g = g * scale;
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * g;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*mk / bc1) / (math::sqrt(*vk / bc2) + self.eps);
            }
            p.zero_grad();
        }
    }
}

/// `target <- tau * live + (1 - tau) * target`, parameter by parameter.
pub fn soft_update<M: Module + ?Sized>(target: &mut M, live: &M, tau: f64) {
    for (t, l) in target.parameters_mut().into_iter().zip(live.parameters()) {
        for (tv, lv) in t.value.as_mut_slice().iter_mut().zip(l.value.as_slice()) {
            *tv = tau * lv + (1.0 - tau) * *tv;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Optimizers {
    encoder: Adam,
    cell: Adam,
    actor: Adam,
    critic: Adam,
}

/// One learning agent: live and target networks plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: AgentId,
    pub live: AgentModules,
    pub target: AgentModules,
    opt: Optimizers,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(id: AgentId, cfg: &ModelConfig, hp: &Hyperparams, rng: &mut R) -> Result<Self> {
        let prefix = format!("agent{}", id.0);
        let live = AgentModules::init(&prefix, cfg, rng)?;
        Ok(Self::from_modules(id, live, hp))
    }

    pub fn from_modules(id: AgentId, live: AgentModules, hp: &Hyperparams) -> Self {
        let prefix = format!("agent{}", id.0);
        let target = live.renamed(&prefix, &format!("{prefix}/target"));
        let opt = Optimizers {
            encoder: Adam::new(&live.encoder, hp.lr),
            cell: Adam::new(&live.cell, hp.lr),
            actor: Adam::new(&live.actor, hp.lr),
            critic: Adam::new(&live.critic, hp.lr),
        };
        Self { id, live, target, opt }
    }

    /// Live then target parameters.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.live.parameters();
        v.extend(self.target.parameters());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.live.parameters_mut();
        v.extend(self.target.parameters_mut());
        v
    }
}

/// `s = leaky_relu(W_e o)` for one observation.
pub fn encode(obs: &[f64], params: &EncoderParams) -> Result<HiddenState> {
    let mut g = Graph::new();
    let nodes = bind(&mut g, params, false);
    let o = g.constant(Matrix::column(obs));
    let s = encoder_graph(&mut g, &nodes, o)?;
    HiddenState::new(g.value(s).as_slice().to_vec())
}

/// Deterministic action plus optional Gaussian exploration, clipped to
/// `[-1, 1]`. No random numbers are drawn when `noise_sigma == 0`.
pub fn act<R: Rng + ?Sized>(
    s: &HiddenState,
    h: &CommVector,
    params: &ActorParams,
    cfg: &ModelConfig,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Action> {
    let mut g = Graph::new();
    let nodes = bind(&mut g, params, false);
    let sn = g.constant(s.to_column());
    let hn = g.constant(h.to_column());
    let inp = policy_input_graph(&mut g, cfg, sn, hn)?;
    let a = actor_graph(&mut g, &nodes, inp)?;
    let mut out = [0.0; ACT_DIM];
    out.copy_from_slice(g.value(a).as_slice());
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| contract(format!("noise: {e}")))?;
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

pub fn critic_q(s: &HiddenState, h: &CommVector, a: &Action, params: &CriticParams, cfg: &ModelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let sn = g.constant(s.to_column());
    let hn = g.constant(h.to_column());
    let an = g.constant(Matrix::column(a));
    let inp = policy_input_graph(&mut g, cfg, sn, hn)?;
    let q = critic_graph(&mut g, &nodes, inp, an)?;
    Ok(g.value(q).as_slice()[0])
}

/// One joint transition with the recurrent states it was produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceTuple {
    pub obs: Vec<Vec<f64>>,
    pub next_obs: Vec<Vec<f64>>,
    pub cells_prev: Vec<CellState>,
    pub cells: Vec<CellState>,
    pub msgs_prev: Vec<CommVector>,
    pub msgs: Vec<CommVector>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub observed: Vec<BTreeSet<AgentId>>,
    pub next_observed: Vec<BTreeSet<AgentId>>,
}

impl ExperienceTuple {
    pub fn n_agents(&self) -> usize {
        self.obs.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.obs.len();
        let lens = [
            self.next_obs.len(),
            self.cells_prev.len(),
            self.cells.len(),
            self.msgs_prev.len(),
            self.msgs.len(),
            self.actions.len(),
            self.rewards.len(),
            self.observed.len(),
            self.next_observed.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(contract("experience tuple fields disagree on the number of agents"));
        }
        Ok(())
    }
}

/// FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ExperienceTuple>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&ExperienceTuple> {
        self.items.get(i)
    }

    pub fn push(&mut self, t: ExperienceTuple) -> Result<()> {
        t.check()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Indices of a uniform sample without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if k == 0 || k > self.items.len() {
            return Err(contract(format!(
                "cannot sample {k} tuples from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), k).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&ExperienceTuple>> {
        Ok(self.sample_indices(k, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }
}

fn obs_batch(batch: &[&ExperienceTuple], agent: usize, next: bool) -> Result<Matrix> {
    let cols: Vec<&[f64]> = batch
        .iter()
        .map(|t| if next { t.next_obs[agent].as_slice() } else { t.obs[agent].as_slice() })
        .collect();
    Matrix::from_columns(&cols)
}

fn vec_batch<'a, T: 'a>(batch: &[&'a ExperienceTuple], f: impl Fn(&'a ExperienceTuple) -> &'a T, g: impl Fn(&T) -> &[f64]) -> Result<Matrix> {
    let cols: Vec<&[f64]> = batch.iter().map(|t| g(f(t))).collect();
    Matrix::from_columns(&cols)
}

fn check_batch(batch: &[&ExperienceTuple], owner: AgentId, agents: &[Agent], cfg: &ModelConfig) -> Result<usize> {
    if batch.is_empty() {
        return Err(contract("update on an empty batch"));
    }
    let n = agents.len();
    if owner.0 >= n {
        return Err(contract(format!("agent {} of {n}", owner.0)));
    }
    for t in batch {
        t.check()?;
        if t.n_agents() != n {
            return Err(contract("tuple agent count differs from the agent set"));
        }
        if t.obs.iter().chain(&t.next_obs).any(|o| o.len() != cfg.obs_dim) {
            return Err(Error::Shape {
                op: "ddpg_update(obs)",
                left: (cfg.obs_dim, 1),
                right: (t.obs[0].len(), 1),
            });
        }
    }
    Ok(n)
}

/// Encodings of the listed agents' observations as constants.
fn constant_states(g: &mut Graph, batch: &[&ExperienceTuple], modules: &[(usize, &AgentModules)], next: bool) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(modules.len());
    for &(j, m) in modules {
        let nodes = bind(g, &m.encoder, false);
        let o = g.constant(obs_batch(batch, j, next)?);
        let s = encoder_graph(g, &nodes, o)?;
        out.push(s);
    }
    Ok(out)
}

fn plans_for(batch: &[&ExperienceTuple], owner: AgentId, next: bool) -> Result<Vec<CommPlan>> {
    batch
        .iter()
        .map(|t| {
            let sets = if next { &t.next_observed } else { &t.observed };
            build_plan(owner, &sets[owner.0], t.n_agents())
        })
        .collect()
}

/// Bootstrapped critic targets `y = r + gamma (1 - done) Q'(s', h', mu'(s', h'))`
/// where `h'` is recomputed with target networks from the stored `(C_t, H_t)`.
pub fn critic_targets(batch: &[&ExperienceTuple], owner: AgentId, agents: &[Agent], cfg: &ModelConfig, hp: &Hyperparams) -> Result<Vec<f64>> {
    let n = check_batch(batch, owner, agents, cfg)?;
    let i = owner.0;
    let width = batch.len();
    let mut g = Graph::new();
    let targets: Vec<&AgentModules> = agents.iter().map(|a| &a.target).collect();
    let h = if cfg.communicate {
        let all: Vec<(usize, &AgentModules)> = targets.iter().copied().enumerate().collect();
        let states = constant_states(&mut g, batch, &all, true)?;
        let cells: Vec<Option<CellNodes>> = targets.iter().map(|m| Some(m.cell.bind(&mut g, false))).collect();
        let cells_prev: Vec<NodeId> = (0..n)
            .map(|j| vec_batch(batch, |t| &t.cells[j], CellState::as_slice).map(|m| g.constant(m)))
            .collect::<Result<_>>()?;
        let h_prev = g.constant(vec_batch(batch, |t| &t.msgs[i], CommVector::as_slice)?);
        let plans = plans_for(batch, owner, true)?;
        let out = flow_graph(
            &mut g,
            FlowInputs {
                plans: &plans,
                states: &states,
                cells_prev: &cells_prev,
                h_prev_owner: h_prev,
                cells: &cells,
            },
            &cfg.cell,
        )?;
        (states[i], out.h_final)
    } else {
        let states = constant_states(&mut g, batch, &[(i, targets[i])], true)?;
        (states[0], g.constant(Matrix::zeros(cfg.d, width)))
    };
    let (s_next, h_next) = h;
    let actor = bind(&mut g, &targets[i].actor, false);
    let critic = targets[i].critic.bind(&mut g, false);
    let inp = policy_input_graph(&mut g, cfg, s_next, h_next)?;
    let a_next = actor_graph(&mut g, &actor, inp)?;
    let q_next = critic_graph(&mut g, &critic, inp, a_next)?;
    let q = g.value(q_next).as_slice();
    Ok(batch
        .iter()
        .zip(q)
        .map(|(t, &q)| {
            let cont = if t.done { 0.0 } else { 1.0 };
            t.rewards[i] + hp.gamma * cont * q
        })
        .collect())
}

/// Values of the live forward pass kept for the actor phase.
struct LivePass {
    critic_loss: f64,
    policy_input: Matrix,
}

/// Accumulates critic-loss gradients into the owner's critic, encoder and
/// cell (and peer cells when `relay_grad` is set). Returns the loss.
pub fn accumulate_critic_grads(batch: &[&ExperienceTuple], owner: AgentId, agents: &mut [Agent], cfg: &ModelConfig, hp: &Hyperparams) -> Result<f64> {
    let y = critic_targets(batch, owner, agents, cfg, hp)?;
    Ok(critic_pass(batch, owner, agents, cfg, &y)?.critic_loss)
}

fn critic_pass(batch: &[&ExperienceTuple], owner: AgentId, agents: &mut [Agent], cfg: &ModelConfig, y: &[f64]) -> Result<LivePass> {
    let n = agents.len();
    let i = owner.0;
    let width = batch.len();
    let mut g = Graph::new();

    let enc_nodes = bind(&mut g, &agents[i].live.encoder, true);
    let o = g.constant(obs_batch(batch, i, false)?);
    let s_own = encoder_graph(&mut g, &enc_nodes, o)?;

    let mut cell_nodes: Vec<Option<CellNodes>> = alloc::vec![None; n];
    let h = if cfg.communicate {
        let mut states = Vec::with_capacity(n);
        for (j, a) in agents.iter().enumerate() {
            if j == i {
                states.push(s_own);
            } else {
                let nodes = bind(&mut g, &a.live.encoder, false);
                let oj = g.constant(obs_batch(batch, j, false)?);
                let sj = encoder_graph(&mut g, &nodes, oj)?;
                states.push(g.detach(sj));
            }
            let live = j == i || cfg.relay_grad;
            cell_nodes[j] = Some(a.live.cell.bind(&mut g, live));
        }
        let cells_prev: Vec<NodeId> = (0..n)
            .map(|j| vec_batch(batch, |t| &t.cells_prev[j], CellState::as_slice).map(|m| g.constant(m)))
            .collect::<Result<_>>()?;
        let h_prev = g.constant(vec_batch(batch, |t| &t.msgs_prev[i], CommVector::as_slice)?);
        let plans = plans_for(batch, owner, false)?;
        flow_graph(
            &mut g,
            FlowInputs {
                plans: &plans,
                states: &states,
                cells_prev: &cells_prev,
                h_prev_owner: h_prev,
                cells: &cell_nodes,
            },
            &cfg.cell,
        )?
        .h_final
    } else {
        g.constant(Matrix::zeros(cfg.d, width))
    };

    let critic_nodes = agents[i].live.critic.bind(&mut g, true);
    let inp = policy_input_graph(&mut g, cfg, s_own, h)?;
    let actions: Vec<&[f64]> = batch.iter().map(|t| t.actions[i].as_slice()).collect();
    let a = g.constant(Matrix::from_columns(&actions)?);
    let q = critic_graph(&mut g, &critic_nodes, inp, a)?;
    let y = g.constant(Matrix::from_vec(1, width, y.to_vec())?);
    let diff = g.sub(q, y)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq)?;
    g.backward(loss)?;

    let agent = &mut agents[i];
    agent.live.critic.collect(&g, &critic_nodes);
    collect_grads(&g, &enc_nodes, &mut agent.live.encoder);
    for (j, nodes) in cell_nodes.iter().enumerate() {
        if let Some(nodes) = nodes {
            if j == i || cfg.relay_grad {
                agents[j].live.cell.collect(&g, nodes);
            }
        }
    }
    Ok(LivePass {
        critic_loss: g.value(loss).as_slice()[0],
        policy_input: g.value(inp).clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// One DDPG step for `owner`: critic regression to the bootstrapped target
/// (training critic, encoder and cell), deterministic policy gradient for the
/// actor, then soft target updates. Other agents are read, never written
/// (except peer cells under `relay_grad`).
pub fn ddpg_update(batch: &[&ExperienceTuple], owner: AgentId, agents: &mut [Agent], cfg: &ModelConfig, hp: &Hyperparams) -> Result<UpdateStats> {
    let y = critic_targets(batch, owner, agents, cfg, hp)?;
    let i = owner.0;
    let live = critic_pass(batch, owner, agents, cfg, &y)?;
    {
        let agent = &mut agents[i];
        agent.opt.critic.step(&mut agent.live.critic, hp.grad_clip);
        agent.opt.encoder.step(&mut agent.live.encoder, hp.grad_clip);
        if cfg.communicate {
            agent.opt.cell.step(&mut agent.live.cell, hp.grad_clip);
        }
    }
    if cfg.communicate && cfg.relay_grad {
        for (j, a) in agents.iter_mut().enumerate() {
            if j != i {
                a.opt.cell.step(&mut a.live.cell, hp.grad_clip);
            }
        }
    }

    let agent = &mut agents[i];
    let mut g = Graph::new();
    let actor_nodes = bind(&mut g, &agent.live.actor, true);
    let critic_nodes = agent.live.critic.bind(&mut g, false);
    let inp = g.constant(live.policy_input);
    let a = actor_graph(&mut g, &actor_nodes, inp)?;
    let q = critic_graph(&mut g, &critic_nodes, inp, a)?;
    let mean_q = g.mean(q)?;
    let loss = g.scale(mean_q, -1.0);
    g.backward(loss)?;
    collect_grads(&g, &actor_nodes, &mut agent.live.actor);
    agent.opt.actor.step(&mut agent.live.actor, hp.grad_clip);

    soft_update(&mut agent.target, &agent.live, hp.tau);
    Ok(UpdateStats {
        critic_loss: live.critic_loss,
        actor_loss: g.value(loss).as_slice()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, obs: usize) -> ModelConfig {
        ModelConfig {
            d,
            obs_dim: obs,
            critic_width: 4,
            ..Default::default()
        }
    }

    #[test]
    fn encode_zero_and_identity() {
        let mut e = EncoderParams(Linear::zeros("e", 2, 2));
        assert_eq!(encode(&[0.3, -0.4], &e).unwrap().as_slice(), &[0.0, 0.0]);
        e.0.w.value = Matrix::identity(2);
        assert_eq!(encode(&[-1.0, 2.0], &e).unwrap().as_slice(), &[-0.01, 2.0]);
        assert!(encode(&[1.0], &e).is_err());
    }

    #[test]
    fn act_zero_weights_and_determinism() {
        let c = cfg(2, 2);
        let actor = ActorParams(Linear::zeros("a", ACT_DIM, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = HiddenState::new(alloc::vec![0.5, -1.0]).unwrap();
        let h = CommVector::new(alloc::vec![0.1, 0.2]).unwrap();
        assert_eq!(act(&s, &h, &actor, &c, 0.0, &mut rng).unwrap(), [0.0, 0.0]);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut rng_a = ChaCha8Rng::seed_from_u64(3);
        let _ = act(&s, &h, &actor, &c, 0.0, &mut rng_a).unwrap();
        assert_eq!(rng_a.random::<u64>(), rng2.random::<u64>(), "noise-free act must not draw");
        let noisy = act(&s, &h, &actor, &c, 5.0, &mut rng).unwrap();
        assert!(noisy.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn critic_zero_and_linear_in_output_layer() {
        let c = cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = AgentModules::init("x", &c, &mut rng).unwrap();
        let s = HiddenState::new(alloc::vec![0.5, 1.0]).unwrap();
        let h = CommVector::new(alloc::vec![-0.3, 0.2]).unwrap();
        let a = [0.4, -0.9];
        let q1 = critic_q(&s, &h, &a, &m.critic, &c).unwrap();
        m.critic.out.w.value = m.critic.out.w.value.scale(2.0);
        let q2 = critic_q(&s, &h, &a, &m.critic, &c).unwrap();
        assert!((q2 - 2.0 * q1).abs() <= 1e-15 * q1.abs().max(1.0));
        for p in m.critic.parameters_mut() {
            p.value.fill(0.0);
        }
        assert_eq!(critic_q(&s, &h, &a, &m.critic, &c).unwrap(), 0.0);
    }

    #[test]
    fn replay_fifo_and_errors() {
        let t = |r: f64| ExperienceTuple {
            obs: alloc::vec![alloc::vec![0.0]],
            next_obs: alloc::vec![alloc::vec![0.0]],
            cells_prev: alloc::vec![CellState::zeros(1)],
            cells: alloc::vec![CellState::zeros(1)],
            msgs_prev: alloc::vec![CommVector::zeros(1)],
            msgs: alloc::vec![CommVector::zeros(1)],
            actions: alloc::vec![[0.0, 0.0]],
            rewards: alloc::vec![r],
            done: false,
            observed: alloc::vec![BTreeSet::new()],
            next_observed: alloc::vec![BTreeSet::new()],
        };
        let mut buf = ReplayBuffer::new(2);
        for r in [1.0, 2.0, 3.0] {
            buf.push(t(r)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).unwrap().rewards[0], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(3, &mut rng).is_err());
        let mut idx = buf.sample_indices(2, &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, [0, 1]);
        let mut bad = t(0.0);
        bad.rewards.clear();
        assert!(buf.push(bad).is_err());
    }

    #[test]
    fn hyperparam_validation_and_noise_schedule() {
        let hp = Hyperparams::default();
        hp.validate().unwrap();
        assert!(Hyperparams { gamma: 1.0, ..hp }.validate().is_err());
        assert!(Hyperparams { tau: 0.0, ..hp }.validate().is_err());
        assert_eq!(hp.noise_sigma(0.0), 0.3);
        assert!((hp.noise_sigma(0.25) - 0.175).abs() < 1e-12);
        assert_eq!(hp.noise_sigma(0.5), 0.05);
        assert_eq!(hp.noise_sigma(0.9), 0.05);
    }

    #[test]
    fn soft_update_contracts_gap() {
        let c = cfg(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let live = AgentModules::init("l", &c, &mut rng).unwrap();
        let mut target = AgentModules::init("t", &c, &mut rng).unwrap();
        let gap0 = max_gap(&target, &live);
        let tau = 0.1;
        for k in 1..=20 {
            soft_update(&mut target, &live, tau);
            let bound = libm::pow(1.0 - tau, k as f64) * gap0;
            assert!(max_gap(&target, &live) <= bound * (1.0 + 1e-12));
        }
    }

    fn max_gap(a: &AgentModules, b: &AgentModules) -> f64 {
        a.parameters()
            .iter()
            .zip(b.parameters())
            .map(|(x, y)| x.value.max_abs_diff(&y.value))
            .fold(0.0, f64::max)
    }

    #[test]
    fn renamed_target_ids_are_distinct() {
        let c = cfg(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = Agent::new(AgentId(0), &c, &Hyperparams::default(), &mut rng).unwrap();
        let mut ids: Vec<&str> = agent.parameters().iter().map(|p| p.id()).collect();
        let total = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), total);
        assert!(agent.target.encoder.0.w.id().starts_with("agent0/target/"));
    }
}
