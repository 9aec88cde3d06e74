//! Differentiable pendulum swing-up environment and closed-loop rollouts.
//!
//! Angle convention: alpha = 0 is upright, wrapped to [-pi, pi), so the
//! quadratic reward directly penalizes distance from the goal. Torque is
//! clipped to +/- u_max inside the step; u_max < m*g*l, so swing-up requires
//! pumping.

use crate::graph::{Graph, NodeId};
use crate::layers::DerivedNet;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Discount factor used for every return in the crate.
pub const DISCOUNT: f64 = 0.99;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid pendulum parameters: {0}")]
    BadParams(String),
    #[error("attack sequence length {got} does not match horizon {want}")]
    AttackLength { got: usize, want: usize },
    #[error(transparent)]
    Layer(#[from] crate::layers::LayerError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PendulumParams {
    /// mass [kg]
    pub m: f64,
    /// length [m]
    pub l: f64,
    /// gravity [m/s^2]
    pub g: f64,
    /// viscous damping [N m s]
    pub c: f64,
    /// integration step [s]
    pub dt: f64,
    /// torque limit [N m]
    pub u_max: f64,
    /// episode length [steps]
    pub horizon: usize,
    /// process-noise scale on the torque [N m]
    pub noise: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            m: 0.25,
            l: 0.5,
            g: 9.81,
            c: 0.01,
            dt: 0.05,
            u_max: 1.0,
            horizon: 200,
            noise: 0.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.m, self.l, self.g, self.c, self.dt, self.u_max];
        if positive.iter().any(|&v| v <= 0.0) || self.noise < 0.0 || self.horizon == 0 {
            return Err(EnvError::BadParams("all parameters must be positive (noise >= 0)".into()));
        }
        if self.u_max >= self.m * self.g * self.l {
            return Err(EnvError::BadParams(
                "u_max must be below m*g*l so that swing-up requires pumping".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    /// angle [rad], 0 = upright, wrapped to [-pi, pi)
    pub alpha: f64,
    /// angular velocity [rad/s]
    pub alpha_dot: f64,
}

/// Wraps an angle to [-pi, pi); pi maps to -pi.
pub fn wrap_angle(alpha: f64) -> f64 {
    (alpha + PI).rem_euclid(2.0 * PI) - PI
}

/// Quadratic reward r = -(alpha^2 + 0.1 alpha_dot^2 + 0.001 u^2).
pub fn reward(s: PendulumState, u: f64) -> f64 {
    -(s.alpha * s.alpha + 0.1 * s.alpha_dot * s.alpha_dot + 0.001 * u * u)
}

/// One semi-implicit Euler step. `w` is an additive torque disturbance.
pub fn pendulum_step(s: PendulumState, u: f64, p: &PendulumParams, w: f64) -> PendulumState {
    let u = u.clamp(-p.u_max, p.u_max);
    let ml2 = p.m * p.l * p.l;
    let acc = (p.g / p.l) * s.alpha.sin() + (u + w) / ml2 - (p.c / ml2) * s.alpha_dot;
    let alpha_dot = s.alpha_dot + p.dt * acc;
    let alpha = wrap_angle(s.alpha + p.dt * alpha_dot);
    PendulumState { alpha, alpha_dot }
}

/// Total mechanical energy; potential is maximal upright.
pub fn energy(s: PendulumState, p: &PendulumParams) -> f64 {
    0.5 * p.m * p.l * p.l * s.alpha_dot * s.alpha_dot + p.m * p.g * p.l * s.alpha.cos()
}

/// Relative energy drift of the undamped, unforced pendulum over `steps`
/// steps. Semi-implicit Euler staggers velocities half a step behind
/// positions (it is leapfrog in disguise), so the energy at integer time n
/// pairs alpha_n with the velocity reconstructed from the surrounding
/// half-step values: the midpoint average carries an O(dt^2) interpolation
/// bias (dt^2/8) * da/dt that the correction below removes. With that
/// pairing the scheme conserves energy to O(dt^2) with no secular trend.
/// Drift is normalized by max(|E_0|, m*g*l).
pub fn energy_drift(p: &PendulumParams, start: PendulumState, steps: usize) -> f64 {
    let undamped = PendulumParams { c: f64::MIN_POSITIVE, noise: 0.0, ..*p };
    let mut states = vec![start];
    for _ in 0..steps + 1 {
        states.push(pendulum_step(*states.last().unwrap(), 0.0, &undamped, 0.0));
    }
    let staggered = |n: usize| {
        let mid = 0.5 * (states[n].alpha_dot + states[n + 1].alpha_dot);
        let jerk = (p.g / p.l) * states[n].alpha.cos() * mid;
        let v = mid - p.dt * p.dt / 8.0 * jerk;
        energy(PendulumState { alpha: states[n].alpha, alpha_dot: v }, &undamped)
    };
    let e0 = staggered(0);
    let scale = e0.abs().max(p.m * p.g * p.l);
    ((staggered(steps) - e0) / scale).abs()
}

/// Initial-state distribution: alpha ~ U(-pi, pi], alpha_dot ~ U(-1, 1).
pub fn sample_initial_state(rng: &mut ChaCha8Rng) -> PendulumState {
    PendulumState {
        alpha: -rng.gen_range(-PI..PI),
        alpha_dot: rng.gen_range(-1.0..1.0),
    }
}

// ---------------------------------------------------------------------------
// graph-recorded dynamics (for trajectory attacks)
// ---------------------------------------------------------------------------

/// Records one dynamics step on the tape; all scalars are 1x1 nodes. Returns
/// (alpha', alpha_dot'). The torque is clipped inside the step.
pub fn pendulum_step_graph(
    g: &mut Graph,
    alpha: NodeId,
    alpha_dot: NodeId,
    u: NodeId,
    p: &PendulumParams,
    w: f64,
) -> crate::graph::Result<(NodeId, NodeId)> {
    let ml2 = p.m * p.l * p.l;
    let u_clipped = g.clip(u, -p.u_max, p.u_max)?;
    let sin_a = g.sin(alpha)?;
    let grav = g.scale(sin_a, p.g / p.l)?;
    let torque = g.add_const(u_clipped, w)?;
    let torque = g.scale(torque, 1.0 / ml2)?;
    let damp = g.scale(alpha_dot, -p.c / ml2)?;
    let acc0 = g.add(grav, torque)?;
    let acc = g.add(acc0, damp)?;
    let dv = g.scale(acc, p.dt)?;
    let new_dot = g.add(alpha_dot, dv)?;
    let da = g.scale(new_dot, p.dt)?;
    let unwrapped = g.add(alpha, da)?;
    let new_alpha = g.wrap_angle(unwrapped)?;
    Ok((new_alpha, new_dot))
}

/// Reward of (state, action) on the tape.
pub fn reward_graph(
    g: &mut Graph,
    alpha: NodeId,
    alpha_dot: NodeId,
    u: NodeId,
) -> crate::graph::Result<NodeId> {
    let a2 = g.square(alpha)?;
    let d2 = g.square(alpha_dot)?;
    let u2 = g.square(u)?;
    let d2s = g.scale(d2, 0.1)?;
    let u2s = g.scale(u2, 0.001)?;
    let s0 = g.add(a2, d2s)?;
    let s1 = g.add(s0, u2s)?;
    g.scale(s1, -1.0)
}

/// Records a full closed-loop rollout on the tape with one 2x1 perturbation
/// leaf per step added to the observation, so the discounted return is
/// differentiable with respect to the perturbation sequence. `window` selects
/// the steps that get leaves (others use the fixed values from `base`);
/// returns (discounted-return node, leaf ids for the window).
pub fn rollout_graph(
    g: &mut Graph,
    net: &DerivedNet,
    p: &PendulumParams,
    start: PendulumState,
    base: &[[f64; 2]],
    window: std::ops::Range<usize>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if base.len() != p.horizon {
        return Err(EnvError::AttackLength { got: base.len(), want: p.horizon });
    }
    let gnet = net.stage(g);
    let mut alpha = g.leaf(Tensor::scalar(start.alpha));
    let mut alpha_dot = g.leaf(Tensor::scalar(start.alpha_dot));
    let mut leaves = Vec::new();
    let mut ret: Option<NodeId> = None;
    let mut disc = 1.0;
    for t in 0..p.horizon {
        let obs = g.concat_rows(alpha, alpha_dot)?;
        let obs = if window.contains(&t) {
            let v = g.leaf(Tensor::col(&base[t]));
            leaves.push(v);
            g.add(obs, v)?
        } else if base[t] != [0.0, 0.0] {
            let v = g.leaf(Tensor::col(&base[t]));
            g.add(obs, v)?
        } else {
            obs
        };
        let u = gnet.forward(g, obs)?;
        let u = g.clip(u, -p.u_max, p.u_max)?;
        let r = reward_graph(g, alpha, alpha_dot, u)?;
        let r = g.scale(r, disc)?;
        ret = Some(match ret {
            Some(acc) => g.add(acc, r)?,
            None => r,
        });
        disc *= DISCOUNT;
        let (a1, d1) = pendulum_step_graph(g, alpha, alpha_dot, u, p, 0.0)?;
        alpha = a1;
        alpha_dot = d1;
    }
    Ok((ret.unwrap(), leaves))
}

// ---------------------------------------------------------------------------
// perturbation adapters and rollouts
// ---------------------------------------------------------------------------

/// Observation perturbation applied before the policy sees the state.
#[derive(Debug, Clone)]
pub enum Perturbation {
    None,
    /// observation at t is the state at t-k; t < k sees the initial state
    Delay(usize),
    /// per-component uniform noise in [-epsilon, epsilon], fresh each step
    UniformNoise { epsilon: f64, seed: u64 },
    /// fixed additive sequence, one 2-vector per step
    FixedAttack(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, Copy)]
pub enum ActionMode {
    /// action = policy mean
    Deterministic,
    /// Gaussian action with the given log standard deviation
    Stochastic { log_std: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<PendulumState>,
    pub observations: Vec<[f64; 2]>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub perturbations: Vec<[f64; 2]>,
    pub final_state: PendulumState,
    pub discounted_return: f64,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,alpha_dot,u,reward,v1,v2\n");
        for t in 0..self.states.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t,
                self.states[t].alpha,
                self.states[t].alpha_dot,
                self.actions[t],
                self.rewards[t],
                self.perturbations[t][0],
                self.perturbations[t][1],
            ));
        }
        out
    }
}

/// Closed-loop rollout of a policy mean network against the pendulum.
/// Deterministic given (seed, action seed); the process-noise stream is
/// derived from `seed`.
pub fn rollout(
    net: &DerivedNet,
    p: &PendulumParams,
    seed: u64,
    perturbation: &Perturbation,
    mode: ActionMode,
    start: Option<PendulumState>,
) -> Result<Trajectory> {
    if let Perturbation::FixedAttack(seq) = perturbation {
        if seq.len() != p.horizon {
            return Err(EnvError::AttackLength { got: seq.len(), want: p.horizon });
        }
    }
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = start.unwrap_or_else(|| sample_initial_state(&mut env_rng));
    let mut noise_rng = match perturbation {
        Perturbation::UniformNoise { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut action_rng = match mode {
        ActionMode::Stochastic { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ActionMode::Deterministic => None,
    };
    let mut history: Vec<PendulumState> = Vec::with_capacity(p.horizon);

    let mut traj = Trajectory {
        states: Vec::with_capacity(p.horizon),
        observations: Vec::with_capacity(p.horizon),
        actions: Vec::with_capacity(p.horizon),
        rewards: Vec::with_capacity(p.horizon),
        perturbations: Vec::with_capacity(p.horizon),
        final_state: state,
        discounted_return: 0.0,
    };
    let mut disc = 1.0;
    for t in 0..p.horizon {
        history.push(state);
        let observed = match perturbation {
            Perturbation::Delay(k) => history[t.saturating_sub(*k)],
            _ => state,
        };
        let v: [f64; 2] = match perturbation {
            Perturbation::UniformNoise { epsilon, .. } => {
                let rng = noise_rng.as_mut().unwrap();
                [rng.gen_range(-epsilon..=*epsilon), rng.gen_range(-epsilon..=*epsilon)]
            }
            Perturbation::FixedAttack(seq) => seq[t],
            _ => [0.0, 0.0],
        };
        let obs = [observed.alpha + v[0], observed.alpha_dot + v[1]];
        let mean = net.forward(&Tensor::col(&obs)).as_scalar();
        let u = match (&mode, &mut action_rng) {
            (ActionMode::Stochastic { log_std, .. }, Some(rng)) => {
                mean + log_std.exp() * gaussian(rng)
            }
            _ => mean,
        };
        let u = u.clamp(-p.u_max, p.u_max);
        let w = if p.noise > 0.0 {
            env_rng.gen_range(-p.noise..=p.noise)
        } else {
            0.0
        };
        let r = reward(state, u);
        traj.states.push(state);
        traj.observations.push(obs);
        traj.actions.push(u);
        traj.rewards.push(r);
        traj.perturbations.push(v);
        traj.discounted_return += disc * r;
        disc *= DISCOUNT;
        state = pendulum_step(state, u, p, w);
    }
    traj.final_state = state;
    Ok(traj)
}

/// Standard normal draw by Box-Muller from a uniform stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Whether a trajectory counts as a successful stabilization: |alpha| below
/// `angle_tol` over the final `window` steps.
pub fn stabilized(traj: &Trajectory, angle_tol: f64, window: usize) -> bool {
    let n = traj.states.len();
    if n < window {
        return false;
    }
    traj.states[n - window..]
        .iter()
        .all(|s| s.alpha.abs() < angle_tol)
}

// ---------------------------------------------------------------------------
// generic control task used by the PPO trainer
// ---------------------------------------------------------------------------

/// A 2-state, scalar-action control task. Rewards are evaluated on the
/// pre-step state; episodes are fixed-horizon.
pub trait ControlTask: Sync {
    fn horizon(&self) -> usize;
    fn action_limit(&self) -> f64;
    fn reset(&self, rng: &mut ChaCha8Rng) -> [f64; 2];
    /// advances the state, returning (next_state, reward of (s, u))
    fn step(&self, s: [f64; 2], u: f64, rng: &mut ChaCha8Rng) -> ([f64; 2], f64);
}

#[derive(Debug, Clone)]
pub struct PendulumTask {
    pub params: PendulumParams,
}

impl PendulumTask {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(PendulumTask { params })
    }
}

impl ControlTask for PendulumTask {
    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn action_limit(&self) -> f64 {
        self.params.u_max
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let s = sample_initial_state(rng);
        [s.alpha, s.alpha_dot]
    }

    fn step(&self, s: [f64; 2], u: f64, rng: &mut ChaCha8Rng) -> ([f64; 2], f64) {
        let state = PendulumState { alpha: s[0], alpha_dot: s[1] };
        let u = u.clamp(-self.params.u_max, self.params.u_max);
        let w = if self.params.noise > 0.0 {
            rng.gen_range(-self.params.noise..=self.params.noise)
        } else {
            0.0
        };
        let r = reward(state, u);
        let next = pendulum_step(state, u, &self.params, w);
        ([next.alpha, next.alpha_dot], r)
    }
}
