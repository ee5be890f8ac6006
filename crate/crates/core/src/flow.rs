//! Communication plans and the relay of temporary messages.
//!
//! Each agent owns one flow per time step. The first step runs the owner's
//! cell on its own `(c_{t-1}, s_t, h_{t-1})` and keeps both outputs; every
//! following step runs a peer's cell on the peer's `(c_{t-1}, s_t)` and the
//! temporary message, keeping only the message. Peers therefore read their
//! previous memories and never write them, so flows of different owners are
//! independent and can run in any order.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::cell::{cell_step, CellConfig, CellNodes, CellParams, CellState, CommVector, HiddenState};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

/// Ordered agents whose cells process one owner's message; starts at the owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    owner: AgentId,
    sequence: Vec<AgentId>,
}

impl CommPlan {
    /// Validates that `sequence` starts at `owner`, has no duplicates and
    /// only names agents below `n_agents`.
    pub fn new(owner: AgentId, sequence: Vec<AgentId>, n_agents: usize) -> Result<Self> {
        if sequence.first() != Some(&owner) {
            return Err(contract("plan must start with its owner"));
        }
        let mut seen = BTreeSet::new();
        for a in &sequence {
            if a.0 >= n_agents {
                return Err(contract(format!("plan names agent {} of {n_agents}", a.0)));
            }
            if !seen.insert(*a) {
                return Err(contract(format!("agent {} appears twice in plan", a.0)));
            }
        }
        Ok(Self { owner, sequence })
    }

    pub fn owner(&self) -> AgentId {
        self.owner
    }

    pub fn sequence(&self) -> &[AgentId] {
        &self.sequence
    }

    /// The relay agents after the owner.
    pub fn peers(&self) -> &[AgentId] {
        &self.sequence[1..]
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Owner first, then the observed peers in ascending circular index order
/// starting just after the owner.
pub fn build_plan(owner: AgentId, observed: &BTreeSet<AgentId>, n_agents: usize) -> Result<CommPlan> {
    if owner.0 >= n_agents {
        return Err(contract(format!("owner {} of {n_agents} agents", owner.0)));
    }
    if observed.contains(&owner) {
        return Err(contract(format!("agent {} lists itself as observed", owner.0)));
    }
    if let Some(a) = observed.iter().find(|a| a.0 >= n_agents) {
        return Err(contract(format!("observed agent {} of {n_agents}", a.0)));
    }
    let mut peers: Vec<AgentId> = observed.iter().copied().collect();
    peers.sort_by_key(|a| (a.0 + n_agents - owner.0) % n_agents);
    let mut sequence = Vec::with_capacity(peers.len() + 1);
    sequence.push(owner);
    sequence.extend(peers);
    Ok(CommPlan { owner, sequence })
}

/// Every agent except `owner`.
pub fn all_peers(owner: AgentId, n_agents: usize) -> BTreeSet<AgentId> {
    (0..n_agents).filter(|&j| j != owner.0).map(AgentId).collect()
}

/// Tape nodes feeding one owner's flow over a batch of `B` columns.
///
/// `plans[b]` is the plan for column `b`; all plans share the owner.
/// `states`, `cells_prev` and `cells` are indexed by agent. Whether a peer's
/// cell or state carries gradient is decided by how the caller bound it.
#[derive(Debug, Clone, Copy)]
pub struct FlowInputs<'a> {
    pub plans: &'a [CommPlan],
    pub states: &'a [NodeId],
    pub cells_prev: &'a [NodeId],
    pub h_prev_owner: NodeId,
    pub cells: &'a [Option<CellNodes>],
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOutputs {
    pub h_final: NodeId,
    pub c_owner: NodeId,
}

fn cell_nodes(cells: &[Option<CellNodes>], a: AgentId) -> Result<&CellNodes> {
    cells
        .get(a.0)
        .and_then(Option::as_ref)
        .ok_or_else(|| contract(format!("no cell parameters for agent {}", a.0)))
}

fn finite(g: &Graph, id: NodeId, what: impl FnOnce() -> alloc::string::String) -> Result<()> {
    if g.value(id).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(what()))
    }
}

/// Builds one owner's flow on the tape. Columns whose plans differ are
/// routed to the right peer cell by column selection, so each column sees
/// exactly the arithmetic of a single-sample flow.
pub fn flow_graph(g: &mut Graph, inputs: FlowInputs<'_>, cfg: &CellConfig) -> Result<FlowOutputs> {
    let FlowInputs {
        plans,
        states,
        cells_prev,
        h_prev_owner,
        cells,
    } = inputs;
    let owner = plans
        .first()
        .ok_or_else(|| contract("flow over an empty batch"))?
        .owner();
    if plans.iter().any(|p| p.owner() != owner) {
        return Err(contract("all plans of a batched flow must share the owner"));
    }
    let width = plans.len();
    let max_agent = plans.iter().flat_map(|p| p.sequence()).map(|a| a.0).max().unwrap_or(0);
    if max_agent >= states.len() || max_agent >= cells_prev.len() {
        return Err(contract(format!("plan references agent {max_agent} without inputs")));
    }

    let first = cell_step(
        g,
        cell_nodes(cells, owner)?,
        cfg,
        cells_prev[owner.0],
        states[owner.0],
        h_prev_owner,
    )?;
    finite(g, first.c_new, || format!("flow of agent {}: owner memory", owner.0))?;
    finite(g, first.h_out, || format!("flow of agent {}: owner step", owner.0))?;

    let mut h = first.h_out;
    let longest = plans.iter().map(CommPlan::len).max().unwrap_or(1);
    for pos in 1..longest {
        // Group columns by the agent that relays at this position.
        let mut groups: Vec<(AgentId, Vec<usize>)> = Vec::new();
        let mut idle = Vec::new();
        for (col, plan) in plans.iter().enumerate() {
            match plan.sequence().get(pos) {
                Some(&a) => match groups.iter_mut().find(|(g, _)| *g == a) {
                    Some((_, cols)) => cols.push(col),
                    None => groups.push((a, alloc::vec![col])),
                },
                None => idle.push(col),
            }
        }
        groups.sort_by_key(|(a, _)| *a);

        let whole = groups.len() == 1 && idle.is_empty();
        let mut parts: Vec<(NodeId, Vec<usize>)> = Vec::with_capacity(groups.len() + 1);
        for (peer, cols) in groups {
            let nodes = cell_nodes(cells, peer)?;
            let (c, s, hin) = if whole {
                (cells_prev[peer.0], states[peer.0], h)
            } else {
                (
                    g.select_cols(cells_prev[peer.0], &cols)?,
                    g.select_cols(states[peer.0], &cols)?,
                    g.select_cols(h, &cols)?,
                )
            };
            let out = cell_step(g, nodes, cfg, c, s, hin)?;
            finite(g, out.h_out, || format!("flow of agent {}: relay step {pos} (agent {})", owner.0, peer.0))?;
            parts.push((out.h_out, cols));
        }
        if whole {
            h = parts[0].0;
        } else {
            if !idle.is_empty() {
                let rest = g.select_cols(h, &idle)?;
                parts.push((rest, idle));
            }
            let refs: Vec<(NodeId, &[usize])> = parts.iter().map(|(id, c)| (*id, c.as_slice())).collect();
            h = g.assemble_cols(&refs, width)?;
        }
    }
    Ok(FlowOutputs {
        h_final: h,
        c_owner: first.c_new,
    })
}

/// Runs one owner's flow on values. Every input is read-only.
pub fn run_flow(
    plan: &CommPlan,
    states: &[HiddenState],
    cells_prev: &[CellState],
    h_prev_owner: &CommVector,
    params: &[CellParams],
    cfg: &CellConfig,
) -> Result<(CommVector, CellState)> {
    for a in plan.sequence() {
        if a.0 >= states.len() || a.0 >= cells_prev.len() || a.0 >= params.len() {
            return Err(contract(format!("missing data for agent {} in flow", a.0)));
        }
    }
    let mut g = Graph::new();
    let n = states.len().min(cells_prev.len());
    let mut cells = alloc::vec![None; params.len()];
    for a in plan.sequence() {
        cells[a.0] = Some(params[a.0].bind(&mut g, false));
    }
    let s: Vec<NodeId> = states[..n].iter().map(|x| g.constant(x.to_column())).collect();
    let c: Vec<NodeId> = cells_prev[..n].iter().map(|x| g.constant(x.to_column())).collect();
    let h = g.constant(h_prev_owner.to_column());
    let out = flow_graph(
        &mut g,
        FlowInputs {
            plans: core::slice::from_ref(plan),
            states: &s,
            cells_prev: &c,
            h_prev_owner: h,
            cells: &cells,
        },
        cfg,
    )?;
    Ok((
        CommVector::new(g.value(out.h_final).as_slice().to_vec())?,
        CellState::new(g.value(out.c_owner).as_slice().to_vec())?,
    ))
}

/// Result of running every agent's flow for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct CommRoundResult {
    pub h_final: Vec<CommVector>,
    pub c_new: Vec<CellState>,
    pub plans: Vec<CommPlan>,
}

/// Runs all flows in agent order.
pub fn comm_round(
    observed: &[BTreeSet<AgentId>],
    states: &[HiddenState],
    cells_prev: &[CellState],
    h_prev: &[CommVector],
    params: &[CellParams],
    cfg: &CellConfig,
) -> Result<CommRoundResult> {
    let order: Vec<usize> = (0..observed.len()).collect();
    comm_round_ordered(observed, states, cells_prev, h_prev, params, cfg, &order)
}

/// Runs all flows, executing them in `order`. Results are stored by owner,
/// so any permutation of `order` yields the same round.
pub fn comm_round_ordered(
    observed: &[BTreeSet<AgentId>],
    states: &[HiddenState],
    cells_prev: &[CellState],
    h_prev: &[CommVector],
    params: &[CellParams],
    cfg: &CellConfig,
    order: &[usize],
) -> Result<CommRoundResult> {
    let n = observed.len();
    if [states.len(), cells_prev.len(), h_prev.len(), params.len()].iter().any(|&l| l != n) {
        return Err(contract("comm_round inputs disagree on the number of agents"));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(contract("flow execution order must be a permutation of the agents"));
    }
    let mut slots: Vec<Option<(CommVector, CellState, CommPlan)>> = alloc::vec![None; n];
    for &i in order {
        let plan = build_plan(AgentId(i), &observed[i], n)?;
        let (h, c) = run_flow(&plan, states, cells_prev, &h_prev[i], params, cfg)?;
        slots[i] = Some((h, c, plan));
    }
    let mut out = CommRoundResult {
        h_final: Vec::with_capacity(n),
        c_new: Vec::with_capacity(n),
        plans: Vec::with_capacity(n),
    };
    for (h, c, p) in slots.into_iter().flatten() {
        out.h_final.push(h);
        out.c_new.push(c);
        out.plans.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn ids(v: &[usize]) -> BTreeSet<AgentId> {
        v.iter().copied().map(AgentId).collect()
    }

    fn seq(p: &CommPlan) -> Vec<usize> {
        p.sequence().iter().map(|a| a.0).collect()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(seq(&build_plan(AgentId(1), &ids(&[0, 2]), 3).unwrap()), [1, 2, 0]);
        assert_eq!(seq(&build_plan(AgentId(3), &ids(&[6, 1, 8]), 10).unwrap()), [3, 6, 8, 1]);
        assert_eq!(seq(&build_plan(AgentId(0), &ids(&[]), 4).unwrap()), [0]);
    }

    #[test]
    fn plan_errors() {
        assert!(build_plan(AgentId(1), &ids(&[1]), 3).is_err());
        assert!(build_plan(AgentId(1), &ids(&[3]), 3).is_err());
        assert!(CommPlan::new(AgentId(0), alloc::vec![AgentId(1)], 2).is_err());
        assert!(CommPlan::new(AgentId(0), alloc::vec![AgentId(0), AgentId(0)], 2).is_err());
    }

    #[test]
    fn full_plans_are_rotations() {
        let n = 5;
        let base = seq(&build_plan(AgentId(0), &all_peers(AgentId(0), n), n).unwrap());
        for i in 0..n {
            let p = seq(&build_plan(AgentId(i), &all_peers(AgentId(i), n), n).unwrap());
            let mut rot = base.clone();
            rot.rotate_left(i);
            assert_eq!(p, rot);
        }
    }

    #[test]
    fn missing_agent_data_is_a_contract_error() {
        let params = alloc::vec![CellParams::zeros("a0", 2).unwrap()];
        let plan = build_plan(AgentId(0), &ids(&[1]), 2).unwrap();
        let r = run_flow(
            &plan,
            &[HiddenState::zeros(2), HiddenState::zeros(2)],
            &[CellState::zeros(2), CellState::zeros(2)],
            &CommVector::zeros(2),
            &params,
            &CellConfig::default(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_step_is_reported() {
        let mut p = CellParams::zeros("a0", 1).unwrap();
        p.w_o.value = Matrix::from_rows(&[&[f64::MAX, f64::MAX]]).unwrap();
        p.w_a.value = Matrix::from_rows(&[&[f64::NAN, 0.0]]).unwrap();
        let plan = build_plan(AgentId(0), &ids(&[]), 1).unwrap();
        let r = run_flow(
            &plan,
            &[HiddenState::new(alloc::vec![1.0]).unwrap()],
            &[CellState::new(alloc::vec![1.0]).unwrap()],
            &CommVector::zeros(1),
            &[p],
            &CellConfig::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
