//! Robust reinforcement learning with Lipschitz-bounded policy networks.
//!
//! The crate trains Gaussian policies whose mean network is either an
//! unconstrained MLP or a Lipschitz-bounded stack (spectral normalization,
//! AOL, Cayley, or Sandwich layers) with PPO on a differentiable pendulum
//! swing-up task. Certified Lipschitz upper bounds come for free from the
//! layer constructions; empirical lower bounds are estimated by projected
//! gradient ascent; robustness is probed with sample delays, random noise,
//! per-step PGD, and trajectory-level reward-minimizing attacks.

pub mod attack;
pub mod env;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod lipschitz;
pub mod lqr;
pub mod ppo;
pub mod reference;
pub mod report;
pub mod tensor;

pub use graph::{Graph, GraphError, NodeId};

pub use tensor::Tensor;
