//! Training loop, noise-free evaluation and the run analyses.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use recom_core::analysis::{comm_count_matrix, fairness_stats, PlanRecord};
use recom_core::cell::{CellParams, CellState, CommVector, HiddenState};
use recom_core::envs::{self, Action, StepEvents, Vec2};
use recom_core::flow::{all_peers, comm_round_ordered, AgentId};
use recom_core::policy::{act, ddpg_update, encode, Agent, ExperienceTuple, ModelConfig, ReplayBuffer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest};
use crate::config::{check_permutation, CommMode, Method, RunConfig};
use crate::error::{RunError, RunResult};
use crate::rngs::{self, Stream};

/// One environment step as seen by the harness.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub obs: Vec<Vec<f64>>,
    pub next_obs: Vec<Vec<f64>>,
    pub cells_prev: Vec<CellState>,
    pub cells: Vec<CellState>,
    pub msgs_prev: Vec<CommVector>,
    pub msgs: Vec<CommVector>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Peer sets the flows were built from.
    pub observed: Vec<BTreeSet<AgentId>>,
    pub next_observed: Vec<BTreeSet<AgentId>>,
    /// Empty for independent DDPG, which never builds a plan.
    pub plans: Vec<PlanRecord>,
    pub positions: Vec<Vec2>,
    pub events: StepEvents,
}

impl StepRecord {
    fn into_tuple(self) -> ExperienceTuple {
        ExperienceTuple {
            obs: self.obs,
            next_obs: self.next_obs,
            cells_prev: self.cells_prev,
            cells: self.cells,
            msgs_prev: self.msgs_prev,
            msgs: self.msgs,
            actions: self.actions,
            rewards: self.rewards,
            done: self.done,
            observed: self.observed,
            next_observed: self.next_observed,
        }
    }
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub episode: usize,
    pub step: usize,
    pub plans: Vec<PlanRecord>,
    pub observed: Vec<Vec<usize>>,
    pub positions: Vec<Vec2>,
    pub rewards: Vec<f64>,
    pub events: StepEvents,
}

fn comm_sets(cfg: &RunConfig, observed: Vec<BTreeSet<AgentId>>) -> Vec<BTreeSet<AgentId>> {
    let n = observed.len();
    match (cfg.method, cfg.comm) {
        (Method::IndependentDdpg, _) | (_, CommMode::None) => vec![BTreeSet::new(); n],
        (_, CommMode::Observed) => observed,
        (_, CommMode::Full) => (0..n).map(|i| all_peers(AgentId(i), n)).collect(),
    }
}

fn observe_all(world: &envs::WorldState, cfg: &RunConfig) -> RunResult<(Vec<Vec<f64>>, Vec<BTreeSet<AgentId>>)> {
    let mut obs = Vec::with_capacity(cfg.n_agents());
    let mut sets = Vec::with_capacity(cfg.n_agents());
    for i in 0..cfg.n_agents() {
        let (o, s) = envs::observe(world, AgentId(i), &cfg.scenario)?;
        obs.push(o.features);
        sets.push(s);
    }
    Ok((obs, comm_sets(cfg, sets)))
}

/// Runs one episode with fixed agents, calling `on_step` after every step.
/// Returns per-agent episode reward.
pub fn rollout_episode(
    agents: &[Agent],
    cfg: &RunConfig,
    env_rng: &mut ChaCha8Rng,
    mut noise: Option<(f64, &mut ChaCha8Rng)>,
    mut on_step: impl FnMut(StepRecord) -> RunResult<()>,
) -> RunResult<Vec<f64>> {
    let mut ep = Episode::start(cfg, env_rng)?;
    let mut totals = vec![0.0; cfg.n_agents()];
    loop {
        let rec = ep.step(agents, noise.as_mut().map(|(s, r)| (*s, &mut **r)), env_rng)?;
        for (t, r) in totals.iter_mut().zip(&rec.rewards) {
            *t += r;
        }
        let done = rec.done;
        on_step(rec)?;
        if done {
            return Ok(totals);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Per-agent episode reward averaged over the evaluation episodes.
    pub per_agent: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub trace: Vec<TraceLine>,
}

/// Noise-free episodes on worlds drawn from the run's evaluation stream, so
/// every evaluation of a run sees the same worlds.
pub fn evaluate(agents: &[Agent], cfg: &RunConfig) -> RunResult<EvalResult> {
    let mut rng = rngs::stream(cfg.seed, Stream::Eval);
    let n = cfg.n_agents();
    let mut sums = vec![0.0; n];
    let mut trace = Vec::new();
    for episode in 0..cfg.eval_episodes {
        let mut step = 0;
        let totals = rollout_episode(agents, cfg, &mut rng, None, |rec| {
            trace.push(TraceLine {
                episode,
                step,
                plans: rec.plans,
                observed: rec.observed.iter().map(|s| s.iter().map(|a| a.0).collect()).collect(),
                positions: rec.positions,
                rewards: rec.rewards,
                events: rec.events,
            });
            step += 1;
            Ok(())
        })?;
        for (s, t) in sums.iter_mut().zip(totals) {
            *s += t;
        }
    }
    let per_agent: Vec<f64> = sums.iter().map(|s| s / cfg.eval_episodes as f64).collect();
    let (mean, std) = fairness_stats(&per_agent)?;
    Ok(EvalResult {
        per_agent,
        mean,
        std,
        trace,
    })
}

pub fn trace_matrix(trace: &[TraceLine], n: usize) -> RunResult<Vec<Vec<u64>>> {
    Ok(comm_count_matrix(trace.iter().flat_map(|l| &l.plans), n)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub wall_ms: f64,
    pub per_agent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub evals: Vec<EvalRow>,
    /// From the last evaluation; all zeros when none ran.
    pub comm_matrix: Vec<Vec<u64>>,
    pub episode_wall_ms: Vec<f64>,
    pub env_steps: u64,
    pub updates: u64,
}

impl RunMetrics {
    pub fn first(&self) -> Option<&EvalRow> {
        self.evals.first()
    }

    pub fn last(&self) -> Option<&EvalRow> {
        self.evals.last()
    }
}

pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub agents: Vec<Agent>,
}

struct Artifacts {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    agent_rewards: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl Artifacts {
    fn create(dir: &Path) -> RunResult<Self> {
        std::fs::create_dir_all(dir).map_err(RunError::io(dir))?;
        let open = |name: &str, header: &[&str]| -> RunResult<csv::Writer<File>> {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path).map_err(RunError::csv(&path))?;
            w.write_record(header).map_err(RunError::csv(&path))?;
            w.flush().map_err(RunError::io(&path))?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv", &["episode", "mean_reward", "reward_std", "wall_ms"])?,
            agent_rewards: open("agent_rewards.csv", &["episode", "agent", "reward"])?,
            timing: open("timing.csv", &["episode", "wall_ms"])?,
        })
    }

    fn eval_row(&mut self, row: &EvalRow) -> RunResult<()> {
        let path = self.dir.join("metrics.csv");
        let rec = [
            row.episode.to_string(),
            row.mean_reward.to_string(),
            row.reward_std.to_string(),
            row.wall_ms.to_string(),
        ];
        self.metrics.write_record(&rec).map_err(RunError::csv(&path))?;
        self.metrics.flush().map_err(RunError::io(&path))?;
        let path = self.dir.join("agent_rewards.csv");
        for (i, r) in row.per_agent.iter().enumerate() {
            self.agent_rewards
                .write_record(&[row.episode.to_string(), i.to_string(), r.to_string()])
                .map_err(RunError::csv(&path))?;
        }
        self.agent_rewards.flush().map_err(RunError::io(&path))
    }

    fn timing_row(&mut self, episode: usize, ms: f64) -> RunResult<()> {
        let path = self.dir.join("timing.csv");
        self.timing
            .write_record(&[episode.to_string(), ms.to_string()])
            .map_err(RunError::csv(&path))?;
        self.timing.flush().map_err(RunError::io(&path))
    }
}

pub fn write_comm_matrix(path: &Path, m: &[Vec<u64>]) -> RunResult<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(RunError::csv(path))?;
    for row in m {
        w.write_record(row.iter().map(u64::to_string)).map_err(RunError::csv(path))?;
    }
    w.flush().map_err(RunError::io(path))
}

pub fn write_trace(path: &Path, trace: &[TraceLine]) -> RunResult<()> {
    let file = File::create(path).map_err(RunError::io(path))?;
    let mut w = BufWriter::new(file);
    for line in trace {
        serde_json::to_writer(&mut w, line).map_err(RunError::json(path))?;
        w.write_all(b"\n").map_err(RunError::io(path))?;
    }
    w.flush().map_err(RunError::io(path))
}

pub fn read_trace(path: &Path) -> RunResult<Vec<TraceLine>> {
    let text = std::fs::read_to_string(path).map_err(RunError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(RunError::json(path)))
        .collect()
}

/// Agents initialised in agent order from the run's init stream, so their
/// parameters do not depend on the agent sequence.
pub fn init_agents(cfg: &RunConfig) -> RunResult<Vec<Agent>> {
    let model = cfg.model_config();
    let mut rng = rngs::stream(cfg.seed, Stream::Init);
    (0..cfg.n_agents())
        .map(|i| Agent::new(AgentId(i), &model, &cfg.hyperparams, &mut rng).map_err(RunError::from))
        .collect()
}

/// Trains every agent, evaluating before the first episode, every
/// `eval_every` episodes and after the last. With `out`, metrics are
/// appended as they are produced and the final checkpoint is written there.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> RunResult<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model_config();
    let sequence = cfg.sequence();
    let n = cfg.n_agents();
    let mut agents = init_agents(cfg)?;
    let mut env_rng = rngs::stream(cfg.seed, Stream::Env);
    let mut noise_rng = rngs::stream(cfg.seed, Stream::Noise);
    let mut replay_rng = rngs::stream(cfg.seed, Stream::Replay);
    let mut buffer = ReplayBuffer::new(cfg.hyperparams.buffer_capacity);
    let mut artifacts = out.map(Artifacts::create).transpose()?;
    if let Some(dir) = out {
        let manifest = Manifest::new(cfg, "running", 0, 0, 0, [&env_rng, &noise_rng, &replay_rng]);
        checkpoint::write_manifest(dir, &manifest)?;
    }

    let mut metrics = RunMetrics {
        evals: Vec::new(),
        comm_matrix: vec![vec![0; n]; n],
        episode_wall_ms: Vec::new(),
        env_steps: 0,
        updates: 0,
    };
    let mut since_eval = Instant::now();
    let mut last_eval: Option<EvalResult> = None;
    let record_eval = |episode: usize,
                           agents: &[Agent],
                           since: &mut Instant,
                           metrics: &mut RunMetrics,
                           artifacts: &mut Option<Artifacts>|
     -> RunResult<EvalResult> {
        let wall = since.elapsed().as_secs_f64() * 1e3;
        let ev = evaluate(agents, cfg)?;
        let row = EvalRow {
            episode,
            mean_reward: ev.mean,
            reward_std: ev.std,
            wall_ms: if cfg.record_wall_time { wall } else { 0.0 },
            per_agent: ev.per_agent.clone(),
        };
        log::info!("episode {episode}: eval mean {:.4} std {:.4}", ev.mean, ev.std);
        if let Some(a) = artifacts.as_mut() {
            a.eval_row(&row)?;
        }
        metrics.evals.push(row);
        *since = Instant::now();
        Ok(ev)
    };

    for episode in 0..cfg.episodes {
        if episode % cfg.eval_every == 0 {
            last_eval = Some(record_eval(episode, &agents, &mut since_eval, &mut metrics, &mut artifacts)?);
        }
        let started = Instant::now();
        let sigma = cfg.hyperparams.noise_sigma(episode as f64 / cfg.episodes as f64);
        let mut ep = Episode::start(cfg, &mut env_rng)?;
        loop {
            let rec = ep.step(&agents, Some((sigma, &mut noise_rng)), &mut env_rng)?;
            let done = rec.done;
            buffer.push(rec.into_tuple())?;
            metrics.env_steps += 1;
            let ready = buffer.len() >= cfg.hyperparams.batch.max(cfg.warmup_steps);
            if ready && metrics.env_steps % cfg.update_every as u64 == 0 {
                for &i in &sequence {
                    let idx = buffer.sample_indices(cfg.hyperparams.batch, &mut replay_rng)?;
                    let batch: Vec<&ExperienceTuple> = idx.iter().map(|&k| buffer.get(k).expect("sampled index")).collect();
                    let stats = ddpg_update(&batch, AgentId(i), &mut agents, &model, &cfg.hyperparams)?;
                    log::debug!("update agent {i}: critic {:.5} actor {:.5}", stats.critic_loss, stats.actor_loss);
                    metrics.updates += 1;
                }
            }
            if done {
                break;
            }
        }
        let ms = started.elapsed().as_secs_f64() * 1e3;
        metrics.episode_wall_ms.push(ms);
        if let Some(a) = artifacts.as_mut() {
            a.timing_row(episode, ms)?;
        }
    }
    if cfg.episodes > 0 {
        last_eval = Some(record_eval(cfg.episodes, &agents, &mut since_eval, &mut metrics, &mut artifacts)?);
    }
    if let Some(ev) = &last_eval {
        metrics.comm_matrix = trace_matrix(&ev.trace, n)?;
    }

    if let Some(dir) = out {
        write_comm_matrix(&dir.join("comm_matrix.csv"), &metrics.comm_matrix)?;
        if cfg.trace {
            write_trace(&dir.join("trace.jsonl"), last_eval.as_ref().map_or(&[][..], |e| &e.trace))?;
        }
        checkpoint::save_params(dir, &agents)?;
        let manifest = Manifest::new(
            cfg,
            "complete",
            cfg.episodes,
            metrics.env_steps,
            metrics.updates,
            [&env_rng, &noise_rng, &replay_rng],
        );
        checkpoint::write_manifest(dir, &manifest)?;
    }
    Ok(TrainOutcome { metrics, agents })
}

/// Recurrent state of an episode in progress.
pub struct Episode<'a> {
    cfg: &'a RunConfig,
    model: ModelConfig,
    sequence: Vec<usize>,
    world: envs::WorldState,
    cells: Vec<CellState>,
    msgs: Vec<CommVector>,
    obs: Vec<Vec<f64>>,
    observed: Vec<BTreeSet<AgentId>>,
}

impl<'a> Episode<'a> {
    /// Resets the world; memories and messages start at zero.
    pub fn start(cfg: &'a RunConfig, env_rng: &mut ChaCha8Rng) -> RunResult<Self> {
        let model = cfg.model_config();
        let n = cfg.n_agents();
        let world = envs::reset(&cfg.scenario, env_rng)?;
        let (obs, observed) = observe_all(&world, cfg)?;
        Ok(Self {
            cfg,
            sequence: cfg.sequence(),
            world,
            cells: vec![CellState::zeros(model.d); n],
            msgs: vec![CommVector::zeros(model.d); n],
            obs,
            observed,
            model,
        })
    }

    /// Encode, communicate, act (noise drawn in sequence order), step.
    pub fn step(&mut self, agents: &[Agent], noise: Option<(f64, &mut ChaCha8Rng)>, env_rng: &mut ChaCha8Rng) -> RunResult<StepRecord> {
        let n = self.cfg.n_agents();
        let d = self.model.d;
        let states: Vec<HiddenState> = (0..n)
            .map(|j| encode(&self.obs[j], &agents[j].live.encoder))
            .collect::<Result<_, _>>()?;
        let (new_cells, new_msgs, plans) = if self.model.communicate {
            let params: Vec<CellParams> = agents.iter().map(|a| a.live.cell.clone()).collect();
            let round = comm_round_ordered(
                &self.observed,
                &states,
                &self.cells,
                &self.msgs,
                &params,
                &self.model.cell,
                &self.sequence,
            )?;
            let plans = round.plans.iter().map(PlanRecord::from).collect();
            (round.c_new, round.h_final, plans)
        } else {
            (vec![CellState::zeros(d); n], vec![CommVector::zeros(d); n], Vec::new())
        };
        let mut actions = vec![[0.0; 2]; n];
        let (sigma, noise_rng) = match noise {
            Some((s, r)) => (s, Some(r)),
            None => (0.0, None),
        };
        let mut noise_rng = noise_rng;
        for &j in &self.sequence {
            let actor = &agents[j].live.actor;
            actions[j] = match noise_rng.as_deref_mut() {
                Some(rng) => act(&states[j], &new_msgs[j], actor, &self.model, sigma, rng)?,
                // sigma = 0 draws nothing, so any rng will do
                None => act(&states[j], &new_msgs[j], actor, &self.model, 0.0, env_rng)?,
            };
        }
        let out = envs::step(&mut self.world, &actions, &self.cfg.scenario, env_rng)?;
        let (next_obs, next_observed) = observe_all(&self.world, self.cfg)?;
        Ok(StepRecord {
            obs: std::mem::replace(&mut self.obs, next_obs.clone()),
            next_obs,
            cells_prev: std::mem::replace(&mut self.cells, new_cells.clone()),
            cells: new_cells,
            msgs_prev: std::mem::replace(&mut self.msgs, new_msgs.clone()),
            msgs: new_msgs,
            actions,
            rewards: out.rewards,
            done: out.done,
            observed: std::mem::replace(&mut self.observed, next_observed.clone()),
            next_observed,
            plans,
            positions: self.world.agents.iter().map(|b| b.pos).collect(),
            events: out.events,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRow {
    pub sequence: Vec<usize>,
    pub final_reward: f64,
    pub final_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTable {
    pub rows: Vec<PermutationRow>,
    /// Max minus min final reward.
    pub spread: f64,
}

/// Trains once per agent sequence (same seed) and evaluates the final
/// agents. With `episodes = 0` this compares untrained policies.
pub fn permutation_study(base: &RunConfig, permutations: &[Vec<usize>], out: Option<&Path>) -> RunResult<PermutationTable> {
    if permutations.len() < 2 {
        return Err(RunError::Config("permutation study needs at least two sequences".into()));
    }
    for p in permutations {
        check_permutation(p, base.n_agents())?;
    }
    let mut rows = Vec::with_capacity(permutations.len());
    for (k, p) in permutations.iter().enumerate() {
        let cfg = RunConfig {
            agent_sequence: Some(p.clone()),
            ..base.clone()
        };
        let dir = out.map(|o| o.join(format!("perm{k}")));
        let outcome = train(&cfg, dir.as_deref())?;
        let ev = evaluate(&outcome.agents, &cfg)?;
        log::info!("sequence {p:?}: final reward {:.4}", ev.mean);
        rows.push(PermutationRow {
            sequence: p.clone(),
            final_reward: ev.mean,
            final_std: ev.std,
        });
    }
    let max = rows.iter().map(|r| r.final_reward).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.final_reward).fold(f64::INFINITY, f64::min);
    let table = PermutationTable { rows, spread: max - min };
    if let Some(o) = out {
        let path = o.join("permutations.csv");
        let mut w = csv::Writer::from_path(&path).map_err(RunError::csv(&path))?;
        w.write_record(["sequence", "final_reward", "final_std"]).map_err(RunError::csv(&path))?;
        for r in &table.rows {
            let seq = r.sequence.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            w.write_record([seq, r.final_reward.to_string(), r.final_std.to_string()])
                .map_err(RunError::csv(&path))?;
        }
        w.flush().map_err(RunError::io(&path))?;
    }
    Ok(table)
}

/// Identity followed by `k` random permutations drawn from `rng`.
pub fn random_permutations<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = vec![(0..n).collect::<Vec<_>>()];
    for _ in 0..k {
        let mut p: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
        out.push(p);
    }
    out
}
