//! Particle worlds with k-nearest partial observability.
//!
//! Three scenarios share one state layout: agents (predators, hunters and
//! banks are all agents), static landmarks, scripted prey and treasures.
//! Physics is damped first order: `v' = clamp(0.5 v + 0.5 a vmax, vmax)`,
//! `p' = clamp(p + v', [-1, 1]^2)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::flow::AgentId;
use crate::math;

pub type Vec2 = [f64; 2];
/// Force command, each component in `[-1, 1]`.
pub type Action = [f64; 2];

pub const BOUND: f64 = 1.0;
/// Feature value filling unused observation slots. Relative positions lie in
/// `[-2, 2]`, so the sentinel cannot be confused with a real entity.
pub const PAD: f64 = 3.0;
const DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Navigation,
    PredatorPrey,
    Treasure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub collision: f64,
    pub capture: f64,
    pub distance_shaping: f64,
    pub pickup: f64,
    pub deposit: f64,
    pub bank: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            collision: 1.0,
            capture: 10.0,
            distance_shaping: 0.1,
            pickup: 5.0,
            deposit: 5.0,
            bank: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// All learning agents; in `Treasure` the last `n_banks` of them are banks.
    pub n_agents: usize,
    #[serde(default)]
    pub n_landmarks: usize,
    #[serde(default)]
    pub n_prey: usize,
    #[serde(default)]
    pub n_treasures: usize,
    #[serde(default)]
    pub n_banks: usize,
    pub k_visible: usize,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default = "default_radius")]
    pub collision_radius: f64,
    #[serde(default = "default_speed")]
    pub max_speed: f64,
    #[serde(default = "default_prey_ratio")]
    pub prey_speed_ratio: f64,
    #[serde(default)]
    pub rewards: RewardConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_episode_len() -> usize {
    25
}
fn default_radius() -> f64 {
    0.1
}
fn default_speed() -> f64 {
    0.1
}
fn default_prey_ratio() -> f64 {
    2.0
}

impl ScenarioConfig {
    fn base(scenario: Scenario, n_agents: usize, k_visible: usize) -> Self {
        Self {
            scenario,
            n_agents,
            n_landmarks: 0,
            n_prey: 0,
            n_treasures: 0,
            n_banks: 0,
            k_visible,
            episode_len: default_episode_len(),
            collision_radius: default_radius(),
            max_speed: default_speed(),
            prey_speed_ratio: default_prey_ratio(),
            rewards: RewardConfig::default(),
            seed: 0,
        }
    }

    pub fn navigation(n_agents: usize, n_landmarks: usize, k_visible: usize) -> Self {
        Self {
            n_landmarks,
            ..Self::base(Scenario::Navigation, n_agents, k_visible)
        }
    }

    pub fn predator_prey(n_predators: usize, n_prey: usize, k_visible: usize) -> Self {
        Self {
            n_prey,
            ..Self::base(Scenario::PredatorPrey, n_predators, k_visible)
        }
    }

    /// `n_hunters + n_banks` agents, one treasure color per bank.
    pub fn treasure(n_hunters: usize, n_banks: usize, n_treasures: usize, k_visible: usize) -> Self {
        Self {
            n_banks,
            n_treasures,
            ..Self::base(Scenario::Treasure, n_hunters + n_banks, k_visible)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(contract("scenario needs at least one agent"));
        }
        if self.k_visible > self.n_agents - 1 {
            return Err(contract(format!(
                "k_visible {} exceeds the {} possible peers",
                self.k_visible,
                self.n_agents - 1
            )));
        }
        if self.episode_len == 0 {
            return Err(contract("episode_len must be positive"));
        }
        if !(self.collision_radius > 0.0 && self.max_speed > 0.0 && self.prey_speed_ratio > 0.0) {
            return Err(contract("radius and speeds must be positive"));
        }
        match self.scenario {
            Scenario::Navigation if self.n_landmarks == 0 => Err(contract("navigation needs landmarks")),
            Scenario::PredatorPrey if self.n_prey == 0 => Err(contract("predator prey needs prey")),
            Scenario::Treasure if self.n_banks == 0 || self.n_banks >= self.n_agents || self.n_treasures == 0 => {
                Err(contract("treasure needs banks, at least one hunter, and treasures"))
            }
            _ => Ok(()),
        }
    }

    /// Number of non-agent entities a single agent may see.
    fn k_entities(&self) -> usize {
        self.k_visible.max(1)
    }

    fn entity_features(&self) -> usize {
        match self.scenario {
            Scenario::Treasure => 3,
            _ => 2,
        }
    }

    fn extra_features(&self) -> usize {
        match self.scenario {
            Scenario::Treasure => 1 + self.n_banks,
            _ => 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.k_visible + self.entity_features() * self.k_entities() + self.extra_features()
    }

    pub fn n_hunters(&self) -> usize {
        match self.scenario {
            Scenario::Treasure => self.n_agents - self.n_banks,
            _ => self.n_agents,
        }
    }

    fn is_bank(&self, agent: usize) -> bool {
        self.scenario == Scenario::Treasure && agent >= self.n_hunters()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub pos: Vec2,
    pub vel: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Treasure {
    pub pos: Vec2,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<Body>,
    pub landmarks: Vec<Vec2>,
    pub prey: Vec<Body>,
    pub treasures: Vec<Treasure>,
    /// Treasure color each hunter is carrying.
    pub carrying: Vec<Option<usize>>,
    pub step: usize,
}

/// What happened during one step, for tests and traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Agent pairs `(i, j)`, `i < j`, closer than two radii.
    pub collisions: Vec<(usize, usize)>,
    /// `(predator, prey)` pairs closer than two radii.
    pub captures: Vec<(usize, usize)>,
    /// `(hunter, treasure)`.
    pub pickups: Vec<(usize, usize)>,
    /// `(hunter, bank agent)`.
    pub deposits: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    /// Observed peers, nearest first.
    pub peers: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub done: bool,
    pub events: StepEvents,
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    [rng.random_range(-BOUND..BOUND), rng.random_range(-BOUND..BOUND)]
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    math::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]))
}

pub fn reset<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<WorldState> {
    cfg.validate()?;
    let still = |rng: &mut R| Body {
        pos: uniform_point(rng),
        vel: [0.0; 2],
    };
    let agents = (0..cfg.n_agents).map(|_| still(rng)).collect();
    let landmarks = (0..cfg.n_landmarks).map(|_| uniform_point(rng)).collect();
    let prey = (0..cfg.n_prey).map(|_| still(rng)).collect();
    let colors = cfg.n_banks.max(1);
    let treasures = (0..cfg.n_treasures)
        .map(|t| Treasure {
            pos: uniform_point(rng),
            color: t % colors,
        })
        .collect();
    Ok(WorldState {
        agents,
        landmarks,
        prey,
        treasures,
        carrying: vec![None; cfg.n_agents],
        step: 0,
    })
}

/// Indices of the `k` entries nearest to `origin`, ties broken by index.
fn nearest(origin: Vec2, points: impl Iterator<Item = (usize, Vec2)>, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.map(|(i, p)| (dist(origin, p), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn observe(world: &WorldState, agent: AgentId, cfg: &ScenarioConfig) -> Result<(Observation, BTreeSet<AgentId>)> {
    let i = agent.0;
    let me = world
        .agents
        .get(i)
        .ok_or_else(|| contract(format!("agent {i} not in world of {}", world.agents.len())))?;
    let mut f = Vec::with_capacity(cfg.obs_dim());
    f.extend_from_slice(&me.pos);
    f.extend_from_slice(&me.vel);
    let rel = |p: Vec2| [p[0] - me.pos[0], p[1] - me.pos[1]];

    let peers = nearest(
        me.pos,
        world.agents.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, b)| (j, b.pos)),
        cfg.k_visible,
    );
    for slot in 0..cfg.k_visible {
        match peers.get(slot) {
            Some(&j) => f.extend_from_slice(&rel(world.agents[j].pos)),
            None => f.extend_from_slice(&[PAD, PAD]),
        }
    }

    let k = cfg.k_entities();
    let width = cfg.entity_features();
    let colors = cfg.n_banks.max(1);
    let seen: Vec<Vec<f64>> = match cfg.scenario {
        Scenario::Navigation => nearest(me.pos, world.landmarks.iter().copied().enumerate(), k)
            .into_iter()
            .map(|l| rel(world.landmarks[l]).to_vec())
            .collect(),
        Scenario::PredatorPrey => nearest(me.pos, world.prey.iter().map(|b| b.pos).enumerate(), k)
            .into_iter()
            .map(|p| rel(world.prey[p].pos).to_vec())
            .collect(),
        Scenario::Treasure => nearest(me.pos, world.treasures.iter().map(|t| t.pos).enumerate(), k)
            .into_iter()
            .map(|t| {
                let tr = world.treasures[t];
                let r = rel(tr.pos);
                vec![r[0], r[1], tr.color as f64 / colors as f64]
            })
            .collect(),
    };
    for slot in 0..k {
        match seen.get(slot) {
            Some(v) => f.extend_from_slice(v),
            None => f.extend(core::iter::repeat_n(PAD, width)),
        }
    }

    if cfg.scenario == Scenario::Treasure {
        f.push(if cfg.is_bank(i) { 1.0 } else { 0.0 });
        let carry = world.carrying.get(i).copied().flatten();
        f.extend((0..cfg.n_banks).map(|c| if carry == Some(c) { 1.0 } else { 0.0 }));
    }
    debug_assert_eq!(f.len(), cfg.obs_dim());

    let peers: Vec<AgentId> = peers.into_iter().map(AgentId).collect();
    let set = peers.iter().copied().collect();
    Ok((Observation { features: f, peers }, set))
}

fn integrate(body: &mut Body, force: Action, max_speed: f64) {
    let mut v = [
        DAMPING * body.vel[0] + (1.0 - DAMPING) * force[0] * max_speed,
        DAMPING * body.vel[1] + (1.0 - DAMPING) * force[1] * max_speed,
    ];
    let speed = math::sqrt(v[0] * v[0] + v[1] * v[1]);
    if speed > max_speed {
        v = [v[0] * max_speed / speed, v[1] * max_speed / speed];
    }
    body.vel = v;
    for a in 0..2 {
        body.pos[a] = (body.pos[a] + v[a]).clamp(-BOUND, BOUND);
    }
}

/// Unit-norm flight direction: the normalized sum of inverse-square
/// repulsions `(p - q) / |p - q|^3` from every predator `q`.
pub fn scripted_prey(world: &WorldState, prey_id: usize) -> Result<Action> {
    let me = world
        .prey
        .get(prey_id)
        .ok_or_else(|| contract(format!("prey {prey_id} not in world")))?
        .pos;
    let mut sum = [0.0; 2];
    for q in &world.agents {
        let d = [me[0] - q.pos[0], me[1] - q.pos[1]];
        let r = math::sqrt(d[0] * d[0] + d[1] * d[1]);
        if r > 0.0 {
            let r3 = r * r * r;
            sum[0] += d[0] / r3;
            sum[1] += d[1] / r3;
        }
    }
    let norm = math::sqrt(sum[0] * sum[0] + sum[1] * sum[1]);
    if norm > 0.0 && norm.is_finite() {
        Ok([sum[0] / norm, sum[1] / norm])
    } else {
        Ok([0.0, 0.0])
    }
}

fn agent_collisions(world: &WorldState, members: impl Fn(usize) -> bool, radius: f64) -> Vec<(usize, usize)> {
    let n = world.agents.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if members(i) && members(j) && dist(world.agents[i].pos, world.agents[j].pos) < 2.0 * radius {
                out.push((i, j));
            }
        }
    }
    out
}

/// Advances the world one step. The rng is consumed only when a picked-up
/// treasure respawns.
pub fn step<R: Rng + ?Sized>(world: &mut WorldState, actions: &[Action], cfg: &ScenarioConfig, rng: &mut R) -> Result<StepOutcome> {
    let n = world.agents.len();
    if actions.len() != n {
        return Err(contract(format!("{} actions for {n} agents", actions.len())));
    }
    if actions.iter().flatten().any(|a| !a.is_finite()) {
        return Err(contract("non-finite action"));
    }
    let prey_actions: Vec<Action> = (0..world.prey.len()).map(|p| scripted_prey(world, p)).collect::<Result<_>>()?;
    for (body, a) in world.agents.iter_mut().zip(actions) {
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        integrate(body, a, cfg.max_speed);
    }
    for (body, a) in world.prey.iter_mut().zip(prey_actions) {
        integrate(body, a, cfg.max_speed * cfg.prey_speed_ratio);
    }
    world.step += 1;

    let r = cfg.collision_radius;
    let rc = &cfg.rewards;
    let mut events = StepEvents::default();
    let mut rewards = vec![0.0; n];
    match cfg.scenario {
        Scenario::Navigation => {
            events.collisions = agent_collisions(world, |_| true, r);
            for (i, body) in world.agents.iter().enumerate() {
                let near = world.landmarks.iter().map(|&l| dist(body.pos, l)).fold(f64::INFINITY, f64::min);
                rewards[i] = -near;
            }
            for &(i, j) in &events.collisions {
                rewards[i] -= rc.collision;
                rewards[j] -= rc.collision;
            }
        }
        Scenario::PredatorPrey => {
            events.collisions = agent_collisions(world, |_| true, r);
            for (i, a) in world.agents.iter().enumerate() {
                for (p, b) in world.prey.iter().enumerate() {
                    if dist(a.pos, b.pos) < 2.0 * r {
                        events.captures.push((i, p));
                    }
                }
            }
            let mean_near = world
                .agents
                .iter()
                .map(|a| world.prey.iter().map(|b| dist(a.pos, b.pos)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / n as f64;
            let shared = rc.capture * events.captures.len() as f64
                - rc.distance_shaping * mean_near
                - rc.collision * events.collisions.len() as f64;
            rewards.iter_mut().for_each(|x| *x = shared);
        }
        Scenario::Treasure => {
            let hunters = cfg.n_hunters();
            events.collisions = agent_collisions(world, |i| i < hunters, r);
            for &(i, j) in &events.collisions {
                rewards[i] -= rc.collision;
                rewards[j] -= rc.collision;
            }
            for h in 0..hunters {
                let pos = world.agents[h].pos;
                match world.carrying[h] {
                    None => {
                        let hit = world.treasures.iter().position(|t| dist(pos, t.pos) < 2.0 * r);
                        if let Some(t) = hit {
                            world.carrying[h] = Some(world.treasures[t].color);
                            world.treasures[t].pos = uniform_point(rng);
                            rewards[h] += rc.pickup;
                            events.pickups.push((h, t));
                        }
                    }
                    Some(color) => {
                        let bank = hunters + color;
                        if bank < n && dist(pos, world.agents[bank].pos) < 2.0 * r {
                            world.carrying[h] = None;
                            rewards[h] += rc.deposit;
                            rewards[bank] += rc.bank;
                            events.deposits.push((h, bank));
                        }
                    }
                }
            }
        }
    }
    if rewards.iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::Numeric(format!("non-finite reward at step {}", world.step)));
    }
    Ok(StepOutcome {
        rewards,
        done: world.step >= cfg.episode_len,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_with(agents: &[Vec2]) -> WorldState {
        WorldState {
            agents: agents.iter().map(|&pos| Body { pos, vel: [0.0; 2] }).collect(),
            landmarks: Vec::new(),
            prey: Vec::new(),
            treasures: Vec::new(),
            carrying: vec![None; agents.len()],
            step: 0,
        }
    }

    #[test]
    fn reset_is_seeded_and_sized() {
        let cfg = ScenarioConfig::navigation(4, 4, 2);
        let a = reset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = reset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.agents.len(), 4);
        assert!(a.agents.iter().all(|b| b.vel == [0.0, 0.0]));
        let bad = ScenarioConfig::navigation(4, 4, 4);
        assert!(reset(&bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn navigation_distance_reward() {
        let cfg = ScenarioConfig::navigation(1, 1, 0);
        let mut w = world_with(&[[0.0, 0.0]]);
        w.landmarks = vec![[0.3, 0.4]];
        let out = step(&mut w, &[[0.0, 0.0]], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out.rewards[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn colocated_agents_both_penalized() {
        let cfg = ScenarioConfig::navigation(3, 1, 1);
        let mut w = world_with(&[[0.0, 0.0], [0.05, 0.0], [0.9, 0.9]]);
        w.landmarks = vec![[0.9, 0.9]];
        let out = step(&mut w, &[[0.0; 2]; 3], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.events.collisions, vec![(0, 1)]);
        let d0 = dist([0.0, 0.0], [0.9, 0.9]);
        assert!((out.rewards[0] + d0 + 1.0).abs() < 1e-12);
        assert!(out.rewards[2] > -1e-12);
    }

    #[test]
    fn nearest_peers_and_padding() {
        let cfg = ScenarioConfig::navigation(5, 1, 3);
        let mut w = world_with(&[[0.0, 0.0], [0.4, 0.0], [0.0, -0.3], [0.2, 0.0], [0.1, 0.0]]);
        w.landmarks = vec![[0.5, 0.5]];
        let (obs, set) = observe(&w, AgentId(0), &cfg).unwrap();
        assert_eq!(obs.peers, vec![AgentId(4), AgentId(3), AgentId(2)]);
        assert_eq!(set.len(), 3);
        assert_eq!(obs.features.len(), cfg.obs_dim());

        let cfg3 = ScenarioConfig::navigation(3, 1, 2);
        let w3 = world_with(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]]);
        let (o3, s3) = observe(&w3, AgentId(0), &ScenarioConfig { k_visible: 2, ..cfg3.clone() }).unwrap();
        assert_eq!(s3.len(), 2);
        // one landmark visible, one landmark slot padded
        assert_eq!(&o3.features[o3.features.len() - 2..], &[PAD, PAD]);
    }

    #[test]
    fn prey_flee_directions() {
        let mut w = world_with(&[[-0.5, 0.0]]);
        w.prey = vec![Body {
            pos: [0.0, 0.0],
            vel: [0.0; 2],
        }];
        let a = scripted_prey(&w, 0).unwrap();
        assert!(a[0] > 0.0 && a[1] == 0.0);
        let mut w2 = world_with(&[[-0.3, 0.2], [-0.3, -0.2]]);
        w2.prey = w.prey.clone();
        let a2 = scripted_prey(&w2, 0).unwrap();
        assert!(a2[1].abs() < 1e-15 && a2[0] > 0.0);
    }

    #[test]
    fn zero_action_speed_decays() {
        let cfg = ScenarioConfig::navigation(1, 1, 0);
        let mut w = world_with(&[[0.0, 0.0]]);
        w.landmarks = vec![[0.0, 0.0]];
        w.agents[0].vel = [0.08, -0.04];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prev = 0.08;
        for _ in 0..5 {
            step(&mut w, &[[0.0; 2]], &cfg, &mut rng).unwrap();
            assert!((w.agents[0].vel[0] - 0.5 * prev).abs() < 1e-18);
            prev = w.agents[0].vel[0];
        }
    }

    #[test]
    fn treasure_pickup_and_deposit() {
        let cfg = ScenarioConfig::treasure(1, 1, 1, 0);
        let mut w = world_with(&[[0.0, 0.0], [0.8, 0.8]]);
        w.treasures = vec![Treasure {
            pos: [0.05, 0.0],
            color: 0,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = step(&mut w, &[[0.0; 2]; 2], &cfg, &mut rng).unwrap();
        assert_eq!(out.rewards, vec![5.0, 0.0]);
        assert_eq!(w.carrying[0], Some(0));
        w.agents[0].pos = [0.75, 0.8];
        let out = step(&mut w, &[[0.0; 2]; 2], &cfg, &mut rng).unwrap();
        assert_eq!(out.rewards, vec![5.0, 5.0]);
        assert_eq!(out.events.deposits, vec![(0, 1)]);
    }

    #[test]
    fn action_count_checked_and_done_flag() {
        let cfg = ScenarioConfig {
            episode_len: 2,
            ..ScenarioConfig::navigation(2, 1, 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = reset(&cfg, &mut rng).unwrap();
        assert!(step(&mut w, &[[0.0; 2]], &cfg, &mut rng).is_err());
        assert!(!step(&mut w, &[[0.0; 2]; 2], &cfg, &mut rng).unwrap().done);
        assert!(step(&mut w, &[[0.0; 2]; 2], &cfg, &mut rng).unwrap().done);
    }
}
