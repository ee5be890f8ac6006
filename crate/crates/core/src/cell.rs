//! The gated recurrent cell.
//!
//! A GRU-style update produces the private memory `c_t` from `(c_{t-1}, x_t)`
//! only; a separate attention gate driven by `(x_t, h_{t-1})` selects which
//! parts of `c_t` flow into the outgoing message:
//!
//! ```text
//! r   = sigmoid(W_r [c_prev, x])
//! z   = sigmoid(W_z [c_prev, x])
//! c~  = tanh(W_u [r * c_prev, x])
//! c   = (1 - z) * c_prev + c~
//! a   = softmax(W_a [x, h_prev])
//! h   = tanh(W_o [a * c, h_prev])
//! ```
//!
//! The message input never reaches `c`, which is what lets a cell be reused
//! as a relay step for other agents without touching its memory.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Module, NodeId, Parameter};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::matrix::Matrix;

/// Limit used when the optional memory clamp is switched on.
pub const SAFETY_CLAMP: f64 = 50.0;

macro_rules! finite_vector {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Rejects NaN and infinite entries.
            pub fn new(v: Vec<f64>) -> Result<Self> {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(contract(format!(
                        "{}: entry {i} is not finite",
                        stringify!($name)
                    )));
                }
                Ok(Self(v))
            }

            pub fn zeros(d: usize) -> Self {
                Self(alloc::vec![0.0; d])
            }

            pub fn width(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn to_column(&self) -> Matrix {
                Matrix::column(&self.0)
            }
        }
    };
}

finite_vector!(
    /// Private memory `c` of one agent.
    CellState
);
finite_vector!(
    /// Message `h`: an agent's final communication vector or a temporary
    /// vector while it is being relayed.
    CommVector
);
finite_vector!(
    /// Encoded observation fed to the cell as `x`.
    HiddenState
);

/// How the new memory combines the old memory and the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellUpdate {
    /// `c = (1 - z) * c_prev + c~`.
    #[default]
    Printed,
    /// Standard GRU convex blend `c = (1 - z) * c_prev + z * c~`.
    GruBlend,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    pub update: CellUpdate,
    /// Clamp memory entries to `[-limit, limit]` after each update.
    pub clamp: Option<f64>,
    /// Add a bias vector to every gate product.
    pub bias: bool,
}

/// The five gate matrices of one agent, each `d x 2d`, plus optional biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    d: usize,
    pub w_r: Parameter,
    pub w_z: Parameter,
    pub w_u: Parameter,
    pub w_a: Parameter,
    pub w_o: Parameter,
    pub bias: Option<[Parameter; 5]>,
}

const GATES: [&str; 5] = ["w_r", "w_z", "w_u", "w_a", "w_o"];

impl CellParams {
    pub fn from_matrices(prefix: &str, [r, z, u, a, o]: [Matrix; 5]) -> Result<Self> {
        let d = r.rows();
        if d == 0 {
            return Err(contract("cell width must be at least 1"));
        }
        for m in [&r, &z, &u, &a, &o] {
            if m.shape() != (d, 2 * d) {
                return Err(Error::Shape {
                    op: "cell_params",
                    left: (d, 2 * d),
                    right: m.shape(),
                });
            }
        }
        let p = |name: &str, m| Parameter::new(format!("{prefix}/{name}"), m);
        Ok(Self {
            d,
            w_r: p(GATES[0], r),
            w_z: p(GATES[1], z),
            w_u: p(GATES[2], u),
            w_a: p(GATES[3], a),
            w_o: p(GATES[4], o),
            bias: None,
        })
    }

    pub fn zeros(prefix: &str, d: usize) -> Result<Self> {
        let z = || Matrix::zeros(d, 2 * d);
        Self::from_matrices(prefix, [z(), z(), z(), z(), z()])
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(2d), 1/sqrt(2d)]`.
    pub fn init<R: Rng + ?Sized>(prefix: &str, d: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / math::sqrt(2.0 * d as f64);
        let mut draw = |rows, cols| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let mats = [
            draw(d, 2 * d)?,
            draw(d, 2 * d)?,
            draw(d, 2 * d)?,
            draw(d, 2 * d)?,
            draw(d, 2 * d)?,
        ];
        let mut params = Self::from_matrices(prefix, mats)?;
        if bias {
            params.bias = Some(GATES.map(|g| {
                Parameter::new(format!("{prefix}/b{}", &g[1..]), Matrix::zeros(d, 1))
            }));
        }
        Ok(params)
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn bind(&self, g: &mut Graph, live: bool) -> CellNodes {
        CellNodes {
            w: [
                g.param(&self.w_r, live),
                g.param(&self.w_z, live),
                g.param(&self.w_u, live),
                g.param(&self.w_a, live),
                g.param(&self.w_o, live),
            ],
            b: self.bias.as_ref().map(|b| b.each_ref().map(|p| g.param(p, live))),
        }
    }

    /// Adds gradients of the leaves from [`CellParams::bind`].
    pub fn collect(&mut self, g: &Graph, nodes: &CellNodes) {
        let ids = nodes.w.iter().chain(nodes.b.iter().flatten());
        for (id, p) in ids.zip(self.parameters_mut()) {
            g.accumulate_grad(*id, p);
        }
    }
}

impl Module for CellParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = alloc::vec![&self.w_r, &self.w_z, &self.w_u, &self.w_a, &self.w_o];
        v.extend(self.bias.iter().flatten());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = alloc::vec![
            &mut self.w_r,
            &mut self.w_z,
            &mut self.w_u,
            &mut self.w_a,
            &mut self.w_o
        ];
        v.extend(self.bias.iter_mut().flatten());
        v
    }
}

/// Graph leaves for one bound [`CellParams`].
#[derive(Debug, Clone, Copy)]
pub struct CellNodes {
    w: [NodeId; 5],
    b: Option<[NodeId; 5]>,
}

impl CellNodes {
    /// Leaves in [`Module::parameters`] order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.w.iter().chain(self.b.iter().flatten()).copied().collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellOutputs {
    pub c_new: NodeId,
    pub h_out: NodeId,
    pub attention: NodeId,
}

fn gate(g: &mut Graph, nodes: &CellNodes, k: usize, input: NodeId) -> Result<NodeId> {
    let y = g.matmul(nodes.w[k], input)?;
    match nodes.b {
        Some(b) => g.add_column(y, b[k]),
        None => Ok(y),
    }
}

/// One cell application on the tape. Inputs are `d x B` batches.
pub fn cell_step(
    g: &mut Graph,
    nodes: &CellNodes,
    cfg: &CellConfig,
    c_prev: NodeId,
    x: NodeId,
    h_prev: NodeId,
) -> Result<CellOutputs> {
    let cx = g.concat(c_prev, x)?;
    let r_lin = gate(g, nodes, 0, cx)?;
    let r = g.sigmoid(r_lin);
    let z_lin = gate(g, nodes, 1, cx)?;
    let z = g.sigmoid(z_lin);
    let rc = g.mul(r, c_prev)?;
    let rcx = g.concat(rc, x)?;
    let u_lin = gate(g, nodes, 2, rcx)?;
    let cand = g.tanh(u_lin);
    let keep = g.sub_from_one(z);
    let kept = g.mul(keep, c_prev)?;
    let fresh = match cfg.update {
        CellUpdate::Printed => cand,
        CellUpdate::GruBlend => g.mul(z, cand)?,
    };
    let mut c_new = g.add(kept, fresh)?;
    if let Some(limit) = cfg.clamp {
        c_new = g.clamp(c_new, limit);
    }
    let xh = g.concat(x, h_prev)?;
    let a_lin = gate(g, nodes, 3, xh)?;
    let attention = g.softmax(a_lin)?;
    let ac = g.mul(attention, c_new)?;
    let ach = g.concat(ac, h_prev)?;
    let o_lin = gate(g, nodes, 4, ach)?;
    let h_out = g.tanh(o_lin);
    Ok(CellOutputs {
        c_new,
        h_out,
        attention,
    })
}

/// Value-level cell application; builds and discards a private tape.
pub fn cell_forward(
    c_prev: &CellState,
    x: &HiddenState,
    h_prev: &CommVector,
    params: &CellParams,
    cfg: &CellConfig,
) -> Result<(CellState, CommVector)> {
    let (c, h, _) = cell_forward_traced(c_prev, x, h_prev, params, cfg)?;
    Ok((c, h))
}

/// Like [`cell_forward`], also returning the attention vector.
pub fn cell_forward_traced(
    c_prev: &CellState,
    x: &HiddenState,
    h_prev: &CommVector,
    params: &CellParams,
    cfg: &CellConfig,
) -> Result<(CellState, CommVector, Vec<f64>)> {
    let d = params.width();
    let widths = [
        ("cell_forward(c_prev)", c_prev.width()),
        ("cell_forward(x)", x.width()),
        ("cell_forward(h_prev)", h_prev.width()),
    ];
    for (op, w) in widths {
        if w != d {
            return Err(Error::Shape {
                op,
                left: (d, 1),
                right: (w, 1),
            });
        }
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let c = g.constant(c_prev.to_column());
    let xs = g.constant(x.to_column());
    let h = g.constant(h_prev.to_column());
    let out = cell_step(&mut g, &nodes, cfg, c, xs, h)?;
    let c_new = CellState::new(g.value(out.c_new).as_slice().to_vec())
        .map_err(|_| Error::Numeric(String::from("cell_forward: memory update")))?;
    let h_out = CommVector::new(g.value(out.h_out).as_slice().to_vec())
        .map_err(|_| Error::Numeric(String::from("cell_forward: output gate")))?;
    Ok((c_new, h_out, g.value(out.attention).as_slice().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v<T>(f: fn(Vec<f64>) -> Result<T>, x: &[f64]) -> T {
        f(x.to_vec()).unwrap()
    }

    #[test]
    fn zero_weights_closed_form() {
        let p = CellParams::zeros("a", 2).unwrap();
        let (c, h) = cell_forward(
            &v(CellState::new, &[2.0, 4.0]),
            &v(HiddenState::new, &[0.3, -7.0]),
            &v(CommVector::new, &[0.9, -0.1]),
            &p,
            &CellConfig::default(),
        )
        .unwrap();
        assert_eq!(c.as_slice(), &[1.0, 2.0]);
        assert_eq!(h.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_blend_differs_from_printed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CellParams::init("a", 3, false, &mut rng).unwrap();
        let c = v(CellState::new, &[0.5, -0.2, 0.1]);
        let x = v(HiddenState::new, &[1.0, 0.0, -1.0]);
        let h = CommVector::zeros(3);
        let printed = cell_forward(&c, &x, &h, &p, &CellConfig::default()).unwrap();
        let blend_cfg = CellConfig {
            update: CellUpdate::GruBlend,
            ..Default::default()
        };
        let blend = cell_forward(&c, &x, &h, &p, &blend_cfg).unwrap();
        assert_ne!(printed.0, blend.0);
    }

    #[test]
    fn clamp_bounds_memory() {
        let p = CellParams::zeros("a", 1).unwrap();
        let cfg = CellConfig {
            clamp: Some(SAFETY_CLAMP),
            ..Default::default()
        };
        let (c, _) = cell_forward(
            &v(CellState::new, &[400.0]),
            &HiddenState::zeros(1),
            &CommVector::zeros(1),
            &p,
            &cfg,
        )
        .unwrap();
        assert_eq!(c.as_slice(), &[SAFETY_CLAMP]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CellState::new(alloc::vec![f64::NAN]).is_err());
        assert!(CommVector::new(alloc::vec![f64::INFINITY]).is_err());
        let p = CellParams::zeros("a", 2).unwrap();
        let r = cell_forward(
            &CellState::zeros(3),
            &HiddenState::zeros(2),
            &CommVector::zeros(2),
            &p,
            &CellConfig::default(),
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
        assert!(CellParams::from_matrices(
            "a",
            [
                Matrix::zeros(2, 4),
                Matrix::zeros(2, 4),
                Matrix::zeros(2, 3),
                Matrix::zeros(2, 4),
                Matrix::zeros(2, 4)
            ]
        )
        .is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = CellParams::init("a", 8, true, &mut rng).unwrap();
        let bound = 1.0 / 4.0;
        for w in p.parameters() {
            assert!(w.value.as_slice().iter().all(|x| x.abs() <= bound));
        }
        assert_eq!(p.parameters().len(), 10);
        assert_eq!(p.bias.as_ref().unwrap()[0].id(), "a/b_r");
    }
}
