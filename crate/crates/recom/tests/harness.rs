use std::path::Path;

use recom::config::{CommMode, Method};
use recom::harness::{self, evaluate, init_agents, read_trace, train};
use recom::rngs::{self, Stream};
use recom::{checkpoint, RunConfig};
use recom_core::cell::{cell_forward, CellState, CommVector};
use recom_core::envs::{self, ScenarioConfig};
use recom_core::flow::AgentId;
use recom_core::policy::{act, encode};

fn small(method: Method, episodes: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(ScenarioConfig::navigation(3, 3, 1), method, episodes, seed);
    cfg.model.d = 4;
    cfg.model.critic_width = 8;
    cfg.hyperparams.batch = 16;
    cfg.warmup_steps = 32;
    cfg.update_every = 5;
    cfg.eval_every = 2;
    cfg.eval_episodes = 2;
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn matrix(text: &str) -> Vec<Vec<u64>> {
    text.lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn zero_episode_run_writes_valid_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(Method::Recom, 0, 1), Some(dir.path())).unwrap();
    assert!(out.metrics.evals.is_empty());
    assert_eq!(read(dir.path(), "metrics.csv"), "episode,mean_reward,reward_std,wall_ms\n");
    assert_eq!(matrix(&read(dir.path(), "comm_matrix.csv")), vec![vec![0; 3]; 3]);
    let manifest = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.status, "complete");
    assert_eq!(manifest.episodes_completed, 0);
}

#[test]
fn reruns_are_byte_identical() {
    for method in [Method::Recom, Method::IndependentDdpg] {
        let cfg = small(method, 6, 7);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train(&cfg, Some(a.path())).unwrap();
        train(&cfg, Some(b.path())).unwrap();
        assert!(ra.metrics.updates > 0, "the run must exercise updates");
        for f in ["metrics.csv", "comm_matrix.csv", "agent_rewards.csv", "params.bin"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        // evaluations at 0, every 2 episodes, and the end
        assert_eq!(read(a.path(), "metrics.csv").lines().count(), 1 + 4);
    }
}

#[test]
fn seeds_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&small(Method::Recom, 2, 1), Some(a.path())).unwrap();
    train(&small(Method::Recom, 2, 2), Some(b.path())).unwrap();
    assert_ne!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
}

/// With nobody visible every flow is the owner's cell alone; replaying the
/// evaluation by hand must reproduce the harness reward exactly.
#[test]
fn blind_recom_matches_independent_recurrent_oracle() {
    let mut cfg = small(Method::Recom, 0, 3);
    cfg.scenario = ScenarioConfig::navigation(3, 3, 0);
    let agents = init_agents(&cfg).unwrap();
    let model = cfg.model_config();
    let ev = evaluate(&agents, &cfg).unwrap();

    let mut rng = rngs::stream(cfg.seed, Stream::Eval);
    let mut sums = vec![0.0; 3];
    for _ in 0..cfg.eval_episodes {
        let mut world = envs::reset(&cfg.scenario, &mut rng).unwrap();
        let mut totals = vec![0.0; 3];
        let mut c = vec![CellState::zeros(4); 3];
        let mut h = vec![CommVector::zeros(4); 3];
        loop {
            let mut actions = Vec::new();
            for i in 0..3 {
                let (o, seen) = envs::observe(&world, AgentId(i), &cfg.scenario).unwrap();
                assert!(seen.is_empty());
                let s = encode(&o.features, &agents[i].live.encoder).unwrap();
                let (c2, h2) = cell_forward(&c[i], &s, &h[i], &agents[i].live.cell, &model.cell).unwrap();
                actions.push(act(&s, &h2, &agents[i].live.actor, &model, 0.0, &mut rng).unwrap());
                c[i] = c2;
                h[i] = h2;
            }
            let out = envs::step(&mut world, &actions, &cfg.scenario, &mut rng).unwrap();
            for (t, r) in totals.iter_mut().zip(&out.rewards) {
                *t += r;
            }
            if out.done {
                break;
            }
        }
        for (s, t) in sums.iter_mut().zip(totals) {
            *s += t;
        }
    }
    let expected: Vec<f64> = sums.iter().map(|s| s / cfg.eval_episodes as f64).collect();
    assert_eq!(ev.per_agent, expected);
}

#[test]
fn comm_matrix_agrees_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::Recom, 2, 5);
    cfg.scenario = ScenarioConfig::navigation(4, 2, 2);
    cfg.trace = true;
    train(&cfg, Some(dir.path())).unwrap();
    let m = matrix(&read(dir.path(), "comm_matrix.csv"));
    let trace = read_trace(&dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.len(), cfg.eval_episodes * cfg.scenario.episode_len);
    for i in 0..4 {
        assert_eq!(m[i][i], 0);
        let from_trace: usize = trace.iter().map(|l| l.observed[i].len()).sum();
        assert_eq!(m[i].iter().sum::<u64>(), from_trace as u64);
    }
    assert_eq!(harness::trace_matrix(&trace, 4).unwrap(), m);
}

#[test]
fn full_observability_rows_are_constant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::Recom, 1, 5);
    cfg.comm = CommMode::Full;
    train(&cfg, Some(dir.path())).unwrap();
    let m = matrix(&read(dir.path(), "comm_matrix.csv"));
    let rounds = (cfg.eval_episodes * cfg.scenario.episode_len) as u64;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == j { 0 } else { rounds });
        }
    }
}

#[test]
fn independent_runs_never_communicate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::IndependentDdpg, 2, 5);
    cfg.trace = true;
    train(&cfg, Some(dir.path())).unwrap();
    let trace = read_trace(&dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.iter().all(|l| l.plans.iter().all(|p| p.sequence.len() <= 1)));
    assert_eq!(matrix(&read(dir.path(), "comm_matrix.csv")), vec![vec![0; 3]; 3]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Recom, 3, 9);
    let out = train(&cfg, Some(dir.path())).unwrap();
    let (manifest, agents) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.episodes_completed, 3);
    assert_eq!(manifest.updates, out.metrics.updates);
    for (a, b) in agents.iter().zip(&out.agents) {
        assert_eq!(a.live, b.live);
        assert_eq!(a.target, b.target);
    }
    assert_eq!(evaluate(&agents, &cfg).unwrap().mean, out.metrics.last().unwrap().mean_reward);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train(&small(Method::Recom, 0, 9), Some(dir.path())).unwrap();
    let params = dir.path().join("params.bin");
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}

#[test]
fn permutations_agree_before_training() {
    let mut cfg = small(Method::Recom, 0, 4);
    cfg.scenario = ScenarioConfig::navigation(4, 4, 2);
    let perms = vec![vec![0, 1, 2, 3], vec![3, 1, 0, 2], vec![2, 3, 1, 0]];
    let dir = tempfile::tempdir().unwrap();
    let table = harness::permutation_study(&cfg, &perms, Some(dir.path())).unwrap();
    assert_eq!(table.spread, 0.0);
    assert_eq!(read(dir.path(), "permutations.csv").lines().count(), 4);
    assert!(harness::permutation_study(&cfg, &perms[..1], None).is_err());
    assert!(harness::permutation_study(&cfg, &[vec![0, 1, 2, 3], vec![0, 0, 1, 2]], None).is_err());
}
