//! Dual-recurrence communication for decentralized multi-agent learning.
//!
//! Every agent owns a gated recurrent cell whose private memory `c` is updated
//! only inside the agent's own communication flow, while a temporary message
//! `h` is relayed circularly through the recurrent models of its peers. This
//! crate holds the algorithmic pieces and performs no IO:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` matrices.
//! * [`cell`]: the gated recurrent cell with its attention/output gate.
//! * [`flow`]: communication plans, the relay, and per-round scheduling.
//! * [`policy`]: encoders, DDPG actor/critic, replay buffer and updates.
//! * [`envs`]: particle worlds with k-nearest partial observability.
//! * [`analysis`]: fairness statistics and communication-count matrices.
//! * [`gradcheck`]: finite-difference verification of every differentiable piece.
//!
//! The crate is `no_std` (with `alloc`) when built without the `std` feature.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod cell;
pub mod envs;
mod error;
pub mod flow;
pub mod gradcheck;
pub mod matrix;
mod math;
pub mod policy;

pub use error::{Error, Result};
pub use matrix::Matrix;
