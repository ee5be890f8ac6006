//! Fairness and communication-count statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::flow::CommPlan;
use crate::math;

/// Mean and population standard deviation of per-agent rewards.
pub fn fairness_stats(per_agent: &[f64]) -> Result<(f64, f64)> {
    if per_agent.is_empty() {
        return Err(contract("fairness_stats of an empty reward list"));
    }
    let n = per_agent.len() as f64;
    let mean = per_agent.iter().sum::<f64>() / n;
    let var = per_agent.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, math::sqrt(var)))
}

/// One flow as recorded in a trace: the owner and its full sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub owner: usize,
    pub sequence: Vec<usize>,
}

impl From<&CommPlan> for PlanRecord {
    fn from(p: &CommPlan) -> Self {
        Self {
            owner: p.owner().0,
            sequence: p.sequence().iter().map(|a| a.0).collect(),
        }
    }
}

/// `m[i][j]` counts appearances of agent `j` in agent `i`'s flows; the
/// diagonal stays zero.
pub fn comm_count_matrix<'a>(records: impl IntoIterator<Item = &'a PlanRecord>, n_agents: usize) -> Result<Vec<Vec<u64>>> {
    let mut m = vec![vec![0u64; n_agents]; n_agents];
    for r in records {
        if r.owner >= n_agents {
            return Err(contract(format!("trace owner {} outside {n_agents} agents", r.owner)));
        }
        for &j in &r.sequence {
            if j >= n_agents {
                return Err(contract(format!("trace names agent {j} outside {n_agents} agents")));
            }
            if j != r.owner {
                m[r.owner][j] += 1;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{all_peers, build_plan, AgentId};

    #[test]
    fn fairness_examples() {
        assert_eq!(fairness_stats(&[-1.0, -1.0, -1.0]).unwrap(), (-1.0, 0.0));
        assert_eq!(fairness_stats(&[0.0, 2.0]).unwrap(), (1.0, 1.0));
        assert!(fairness_stats(&[]).is_err());
    }

    #[test]
    fn full_round_counts_are_ones() {
        let recs: Vec<PlanRecord> = (0..3)
            .map(|i| PlanRecord::from(&build_plan(AgentId(i), &all_peers(AgentId(i), 3), 3).unwrap()))
            .collect();
        let m = comm_count_matrix(&recs, 3).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, u64::from(i != j));
            }
        }
    }

    #[test]
    fn unknown_agent_rejected_and_silent_row_zero() {
        let recs = [PlanRecord { owner: 0, sequence: vec![0, 4] }];
        assert!(comm_count_matrix(&recs, 3).is_err());
        let recs = [PlanRecord { owner: 1, sequence: vec![1] }, PlanRecord { owner: 0, sequence: vec![0, 1] }];
        let m = comm_count_matrix(&recs, 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![0, 0]]);
    }
}
