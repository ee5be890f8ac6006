//! Run directories double as checkpoints: `params.bin` holds every agent's
//! live and target parameters in the snapshot format, `manifest.json` the
//! config echo, counters and RNG states.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use recom_core::autodiff::{decode_snapshot, encode_snapshot};
use recom_core::policy::Agent;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{RunError, RunResult};
use crate::harness::init_agents;
use crate::rngs;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub env: String,
    pub noise: String,
    pub replay: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub status: String,
    pub episodes_completed: usize,
    pub env_steps: u64,
    pub updates: u64,
    pub params: String,
    pub rng: RngStates,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(
        cfg: &RunConfig,
        status: &str,
        episodes_completed: usize,
        env_steps: u64,
        updates: u64,
        [env, noise, replay]: [&ChaCha8Rng; 3],
    ) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            status: status.into(),
            episodes_completed,
            env_steps,
            updates,
            params: PARAMS_FILE.into(),
            rng: RngStates {
                env: rngs::to_hex(env),
                noise: rngs::to_hex(noise),
                replay: rngs::to_hex(replay),
            },
            config: cfg.clone(),
        }
    }
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> RunResult<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(m).map_err(RunError::json(&path))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(RunError::io(&path))
}

pub fn read_manifest(dir: &Path) -> RunResult<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(RunError::io(&path))?;
    serde_json::from_str(&text).map_err(RunError::json(&path))
}

pub fn save_params(dir: &Path, agents: &[Agent]) -> RunResult<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = encode_snapshot(agents.iter().flat_map(|a| a.parameters()));
    std::fs::write(&path, bytes).map_err(RunError::io(&path))
}

/// Rebuilds the agents of a finished run. Every stored id must match a
/// parameter of the configured model, with the same shape, and vice versa.
pub fn load(dir: &Path) -> RunResult<(Manifest, Vec<Agent>)> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let path = dir.join(&manifest.params);
    let bytes = std::fs::read(&path).map_err(RunError::io(&path))?;
    let mut stored: BTreeMap<String, recom_core::Matrix> = BTreeMap::new();
    for (id, m) in decode_snapshot(&bytes)? {
        if stored.insert(id.clone(), m).is_some() {
            return Err(RunError::Checkpoint(format!("duplicate parameter {id}")));
        }
    }
    let mut agents = init_agents(&manifest.config)?;
    for agent in &mut agents {
        for p in agent.parameters_mut() {
            let m = stored
                .remove(p.id())
                .ok_or_else(|| RunError::Checkpoint(format!("missing parameter {}", p.id())))?;
            if m.shape() != p.value.shape() {
                return Err(RunError::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.id(),
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m;
        }
    }
    if let Some(id) = stored.keys().next() {
        return Err(RunError::Checkpoint(format!("unexpected parameter {id}")));
    }
    Ok((manifest, agents))
}
