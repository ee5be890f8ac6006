//! Run configuration, loaded from JSON and echoed into every manifest.

use std::path::Path;

use recom_core::envs::ScenarioConfig;
use recom_core::policy::{Hyperparams, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Recom,
    IndependentDdpg,
}

/// Which peers each agent's flow visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    /// The peers in the agent's observation.
    #[default]
    Observed,
    /// Every other agent.
    Full,
    /// Nobody: each agent runs only its own cell.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub method: Method,
    #[serde(default)]
    pub comm: CommMode,
    /// `obs_dim` and `communicate` are filled in from scenario and method.
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_hyperparams")]
    pub hyperparams: Hyperparams,
    pub episodes: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Order in which agents draw exploration noise, are updated and sample
    /// batches. Identity when absent.
    #[serde(default)]
    pub agent_sequence: Option<Vec<usize>>,
    /// Environment steps collected before the first update.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Environment steps between update rounds (one update per agent).
    #[serde(default = "default_update_every")]
    pub update_every: usize,
    /// Write `trace.jsonl` for the final evaluation.
    #[serde(default)]
    pub trace: bool,
    /// Fill `wall_ms` in `metrics.csv`; off keeps the file reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        critic_width: 32,
        ..ModelConfig::default()
    }
}
/// Tuned for 25-step desk episodes: a shorter horizon and wide early
/// exploration learn in a few thousand episodes where the library defaults
/// barely move.
fn default_hyperparams() -> Hyperparams {
    Hyperparams {
        gamma: 0.95,
        batch: 32,
        noise_start: 1.0,
        noise_end: 0.1,
        ..Hyperparams::default()
    }
}
fn default_eval_every() -> usize {
    100
}
fn default_eval_episodes() -> usize {
    10
}
fn default_warmup() -> usize {
    1000
}
fn default_update_every() -> usize {
    4
}

impl RunConfig {
    /// Desk-scale defaults for a scenario.
    pub fn new(scenario: ScenarioConfig, method: Method, episodes: usize, seed: u64) -> Self {
        Self {
            scenario,
            method,
            comm: CommMode::default(),
            model: default_model(),
            hyperparams: default_hyperparams(),
            episodes,
            eval_every: default_eval_every(),
            eval_episodes: default_eval_episodes(),
            seed,
            agent_sequence: None,
            warmup_steps: default_warmup(),
            update_every: default_update_every(),
            trace: false,
            record_wall_time: false,
        }
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.n_agents
    }

    /// Model config completed from scenario and method.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            obs_dim: self.scenario.obs_dim(),
            communicate: self.method == Method::Recom,
            ..self.model
        }
    }

    pub fn sequence(&self) -> Vec<usize> {
        self.agent_sequence
            .clone()
            .unwrap_or_else(|| (0..self.n_agents()).collect())
    }

    pub fn validate(&self) -> RunResult<()> {
        let bad = |e: recom_core::Error| RunError::Config(e.to_string());
        self.scenario.validate().map_err(bad)?;
        self.hyperparams.validate().map_err(bad)?;
        if self.model.d == 0 || self.model.critic_width == 0 {
            return Err(RunError::Config("model widths must be positive".into()));
        }
        if self.model.obs_dim != 0 && self.model.obs_dim != self.scenario.obs_dim() {
            return Err(RunError::Config(format!(
                "model.obs_dim {} does not match the scenario's {}",
                self.model.obs_dim,
                self.scenario.obs_dim()
            )));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.update_every == 0 {
            return Err(RunError::Config(
                "eval_every, eval_episodes and update_every must be positive".into(),
            ));
        }
        if let Some(seq) = &self.agent_sequence {
            check_permutation(seq, self.n_agents())?;
        }
        Ok(())
    }
}

pub fn check_permutation(seq: &[usize], n: usize) -> RunResult<()> {
    let mut sorted = seq.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(RunError::Config(format!(
            "agent sequence {seq:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_gets_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"scenario": {"scenario": "navigation", "n_agents": 4, "n_landmarks": 4, "k_visible": 2},
                "method": "recom", "episodes": 3}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.eval_episodes, 10);
        assert_eq!(cfg.scenario.episode_len, 25);
        assert_eq!(cfg.model_config().obs_dim, cfg.scenario.obs_dim());
        assert_eq!(cfg.sequence(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_permutation_and_unknown_method() {
        let mut cfg = RunConfig::new(ScenarioConfig::navigation(3, 3, 2), Method::Recom, 1, 0);
        cfg.agent_sequence = Some(vec![0, 0, 2]);
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        let bad = serde_json::from_str::<RunConfig>(
            r#"{"scenario": {"scenario": "navigation", "n_agents": 2, "n_landmarks": 1, "k_visible": 1},
                "method": "maddpg", "episodes": 1}"#,
        );
        assert!(bad.is_err());
    }
}
