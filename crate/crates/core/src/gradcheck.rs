//! Central finite-difference checks of every hand-written backward rule that
//! training relies on: the cell, the flow (owner-only and relay), encoder,
//! actor and critic.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{bind, Graph, Module, NodeId, Parameter};
use crate::cell::{cell_step, CellConfig, CellParams, CellUpdate};
use crate::error::{contract, Result};
use crate::flow::{build_plan, flow_graph, AgentId, CommPlan, FlowInputs};
use crate::matrix::Matrix;
use crate::policy::{actor_graph, critic_graph, encoder_graph, ActorParams, CriticParams, EncoderParams, Linear, ACT_DIM};

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub entries: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backprop gradients of `loss` against central differences for
/// every parameter entry of `module`. `loss` binds the module (live or not)
/// and returns the scalar loss and the module's leaves in parameter order.
pub fn check_module<M, F>(name: &'static str, module: &M, eps: f64, loss: F) -> Result<GradReport>
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M, bool) -> Result<(NodeId, Vec<NodeId>)>,
{
    let mut g = Graph::new();
    let (l, leaves) = loss(&mut g, module, true)?;
    g.backward(l)?;
    let n_params = module.parameters().len();
    if leaves.len() != n_params {
        return Err(contract("gradcheck leaves do not match module parameters"));
    }
    let analytic: Vec<Matrix> = leaves
        .iter()
        .zip(module.parameters())
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols())))
        .collect();

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, m, false)?;
        Ok(g.value(l).as_slice()[0])
    };
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = module.clone();
    for k in 0..n_params {
        for e in 0..analytic[k].len() {
            let orig = probe.parameters()[k].value.as_slice()[e];
            probe.parameters_mut()[k].value.as_mut_slice()[e] = orig + eps;
            let up = eval(&probe)?;
            probe.parameters_mut()[k].value.as_mut_slice()[e] = orig - eps;
            let down = eval(&probe)?;
            probe.parameters_mut()[k].value.as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k].as_slice()[e], numeric));
            entries += 1;
        }
    }
    Ok(GradReport {
        name,
        entries,
        max_rel_err: worst,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// `sum(w .* y)` with a fixed random weighting, so no gradient is symmetric.
fn weighted_sum(g: &mut Graph, y: NodeId, w: &Matrix) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn random_cell<R: Rng + ?Sized>(prefix: &str, d: usize, bias: bool, rng: &mut R) -> Result<CellParams> {
    let mut c = CellParams::init(prefix, d, bias, rng)?;
    for p in c.parameters_mut() {
        p.value = uniform(rng, p.value.rows(), p.value.cols(), 0.8);
    }
    Ok(c)
}

#[derive(Debug, Clone)]
struct Cells(Vec<CellParams>);

impl Module for Cells {
    fn parameters(&self) -> Vec<&Parameter> {
        self.0.iter().flat_map(|c| c.parameters()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.iter_mut().flat_map(|c| c.parameters_mut()).collect()
    }
}

#[derive(Debug, Clone)]
struct CellWithInputs {
    cell: CellParams,
    inputs: [Parameter; 3],
}

impl Module for CellWithInputs {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.cell.parameters();
        v.extend(&self.inputs);
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.cell.parameters_mut();
        v.extend(&mut self.inputs);
        v
    }
}

#[derive(Debug, Clone)]
struct CriticWithAction {
    critic: CriticParams,
    action: Parameter,
}

impl Module for CriticWithAction {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.critic.parameters();
        v.push(&self.action);
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.critic.parameters_mut();
        v.push(&mut self.action);
        v
    }
}

/// Cell forward with width `d` on a batch of three columns.
pub fn check_cell<R: Rng + ?Sized>(d: usize, cfg: &CellConfig, rng: &mut R) -> Result<GradReport> {
    let b = 3;
    let module = CellWithInputs {
        cell: random_cell("cell", d, cfg.bias, rng)?,
        inputs: [
            Parameter::new("c_prev", uniform(rng, d, b, 1.0)),
            Parameter::new("x", uniform(rng, d, b, 1.0)),
            Parameter::new("h_prev", uniform(rng, d, b, 1.0)),
        ],
    };
    let (wc, wh) = (uniform(rng, d, b, 1.0), uniform(rng, d, b, 1.0));
    let name = match (cfg.update, cfg.bias) {
        (CellUpdate::Printed, false) => "cell",
        (CellUpdate::Printed, true) => "cell+bias",
        (CellUpdate::GruBlend, _) => "cell/gru_blend",
    };
    check_module(name, &module, EPS, |g, m, live| {
        let nodes = m.cell.bind(g, live);
        let [c, xi, h] = [0, 1, 2].map(|k| g.param(&m.inputs[k], live));
        let out = cell_step(g, &nodes, cfg, c, xi, h)?;
        let lc = weighted_sum(g, out.c_new, &wc)?;
        let lh = weighted_sum(g, out.h_out, &wh)?;
        let mut leaves = nodes.leaves();
        leaves.extend([c, xi, h]);
        Ok((g.add(lc, lh)?, leaves))
    })
}

/// Owner flow over three agents with two differently routed columns. Only
/// the owner's cell is differentiated unless `relay` is set, in which case
/// peer cells carry gradient too.
pub fn check_flow<R: Rng + ?Sized>(d: usize, relay: bool, rng: &mut R) -> Result<GradReport> {
    let n = 3;
    let cfg = CellConfig::default();
    let all: Vec<CellParams> = (0..n)
        .map(|j| random_cell(&alloc::format!("agent{j}"), d, false, rng))
        .collect::<Result<_>>()?;
    let owner = AgentId(0);
    let plans: Vec<CommPlan> = [
        [AgentId(1), AgentId(2)].into_iter().collect(),
        [AgentId(2)].into_iter().collect(),
    ]
    .iter()
    .map(|set| build_plan(owner, set, n))
    .collect::<Result<_>>()?;
    let b = plans.len();
    let states: Vec<Matrix> = (0..n).map(|_| uniform(rng, d, b, 1.0)).collect();
    let prev: Vec<Matrix> = (0..n).map(|_| uniform(rng, d, b, 1.0)).collect();
    let h0 = uniform(rng, d, b, 1.0);
    let (wc, wh) = (uniform(rng, d, b, 1.0), uniform(rng, d, b, 1.0));
    let (name, trained, fixed) = if relay {
        ("flow/relay", Cells(all), Vec::new())
    } else {
        let mut it = all.into_iter();
        let own = it.next().into_iter().collect();
        ("flow/owner", Cells(own), it.collect::<Vec<_>>())
    };
    check_module(name, &trained, EPS, |g, cells, live| {
        let mut nodes: Vec<_> = cells.0.iter().map(|c| c.bind(g, live)).collect();
        nodes.extend(fixed.iter().map(|c| c.bind(g, false)));
        let bound: Vec<_> = nodes.iter().copied().map(Some).collect();
        let s: Vec<NodeId> = states.iter().map(|m| g.constant(m.clone())).collect();
        let c: Vec<NodeId> = prev.iter().map(|m| g.constant(m.clone())).collect();
        let h = g.constant(h0.clone());
        let out = flow_graph(
            g,
            FlowInputs {
                plans: &plans,
                states: &s,
                cells_prev: &c,
                h_prev_owner: h,
                cells: &bound,
            },
            &cfg,
        )?;
        let lc = weighted_sum(g, out.c_owner, &wc)?;
        let lh = weighted_sum(g, out.h_final, &wh)?;
        let leaves = nodes[..cells.0.len()].iter().flat_map(|n| n.leaves()).collect();
        Ok((g.add(lc, lh)?, leaves))
    })
}

pub fn check_encoder<R: Rng + ?Sized>(d: usize, obs_dim: usize, rng: &mut R) -> Result<GradReport> {
    let b = 3;
    let enc = EncoderParams(Linear {
        w: Parameter::new("encoder/w", uniform(rng, d, obs_dim, 1.0)),
        b: Some(Parameter::new("encoder/b", uniform(rng, d, 1, 0.5))),
    });
    let obs = uniform(rng, obs_dim, b, 1.0);
    let w = uniform(rng, d, b, 1.0);
    check_module("encoder", &enc, EPS, |g, enc, live| {
        let nodes = bind(g, enc, live);
        let o = g.constant(obs.clone());
        let s = encoder_graph(g, &nodes, o)?;
        Ok((weighted_sum(g, s, &w)?, nodes))
    })
}

pub fn check_actor<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Result<GradReport> {
    let b = 3;
    let actor = ActorParams(Linear {
        w: Parameter::new("actor/w", uniform(rng, ACT_DIM, input, 1.0)),
        b: Some(Parameter::new("actor/b", uniform(rng, ACT_DIM, 1, 0.5))),
    });
    let x = uniform(rng, input, b, 1.0);
    let w = uniform(rng, ACT_DIM, b, 1.0);
    check_module("actor", &actor, EPS, |g, actor, live| {
        let nodes = bind(g, actor, live);
        let xi = g.constant(x.clone());
        let a = actor_graph(g, &nodes, xi)?;
        Ok((weighted_sum(g, a, &w)?, nodes))
    })
}

/// Critic on `[s, h]` of width `2d`, differentiating the weights and the
/// action input. `joint` adds the mixing layer.
pub fn check_critic<R: Rng + ?Sized>(d: usize, width: usize, joint: bool, rng: &mut R) -> Result<GradReport> {
    let b = 3;
    let layer = |id: &str, rows, cols, rng: &mut R| Linear {
        w: Parameter::new(alloc::format!("{id}/w"), uniform(rng, rows, cols, 1.0)),
        b: Some(Parameter::new(alloc::format!("{id}/b"), uniform(rng, rows, 1, 0.5))),
    };
    let module = CriticWithAction {
        critic: CriticParams {
            msg: layer("critic/msg", width, 2 * d, rng),
            act: layer("critic/act", width, ACT_DIM, rng),
            joint: match joint {
                true => Some(layer("critic/joint", width, 2 * width, rng)),
                false => None,
            },
            out: layer("critic/out", 1, if joint { width } else { 2 * width }, rng),
        },
        action: Parameter::new("action", uniform(rng, ACT_DIM, b, 1.0)),
    };
    let input = uniform(rng, 2 * d, b, 1.0);
    let w = uniform(rng, 1, b, 1.0);
    check_module(if joint { "critic/joint" } else { "critic" }, &module, EPS, |g, m, live| {
        let nodes = m.critic.bind(g, live);
        let a = g.param(&m.action, live);
        let x = g.constant(input.clone());
        let q = critic_graph(g, &nodes, x, a)?;
        let mut leaves = nodes.leaves();
        leaves.push(a);
        Ok((weighted_sum(g, q, &w)?, leaves))
    })
}

/// Every check at width `d`.
pub fn run_suite<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Vec<GradReport>> {
    let printed = CellConfig::default();
    Ok(alloc::vec![
        check_cell(d, &printed, rng)?,
        check_cell(d, &CellConfig { bias: true, ..printed }, rng)?,
        check_cell(d, &CellConfig { update: CellUpdate::GruBlend, ..printed }, rng)?,
        check_flow(d, false, rng)?,
        check_flow(d, true, rng)?,
        check_encoder(d, 2 * d + 1, rng)?,
        check_actor(2 * d, rng)?,
        check_critic(d, 2 * d, false, rng)?,
        check_critic(d, 2 * d, true, rng)?,
    ])
}

pub fn max_rel_err(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn suite_passes_at_small_width() {
        let reports = run_suite(2, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        for r in &reports {
            assert!(r.entries > 0, "{}", r.name);
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a loss whose "leaves" are swapped must be caught
        let p = (
            Parameter::new("a", Matrix::column(&[0.3])),
            Parameter::new("b", Matrix::column(&[-0.7])),
        );
        #[derive(Clone)]
        struct Two(Parameter, Parameter);
        impl Module for Two {
            fn parameters(&self) -> Vec<&Parameter> {
                alloc::vec![&self.0, &self.1]
            }
            fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
                alloc::vec![&mut self.0, &mut self.1]
            }
        }
        let m = Two(p.0, p.1);
        let r = check_module("swapped", &m, EPS, |g, m, live| {
            let a = g.param(&m.0, live);
            let b = g.param(&m.1, live);
            let aa = g.mul(a, a)?;
            let l = g.add(aa, b)?;
            Ok((g.sum(l), alloc::vec![b, a]))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.1);
    }
}
