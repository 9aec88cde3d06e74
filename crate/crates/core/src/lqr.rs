//! Double-integrator task and discrete LQR oracle.
//!
//! The task exists to give the PPO trainer an environment with a known
//! optimum: the discrete algebraic Riccati equation yields the optimal
//! linear policy, and an exact rollout of that policy prices the evaluation
//! initial-state distribution.

use crate::env::{ControlTask, DISCOUNT};
use crate::tensor::{solve, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("Riccati iteration did not converge to {tol} within {max_iter} iterations")]
    NoConvergence { tol: f64, max_iter: usize },
    #[error(transparent)]
    Linalg(#[from] crate::tensor::LinalgError),
}

pub type Result<T> = std::result::Result<T, LqrError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DoubleIntegratorParams {
    /// integration step [s]
    pub dt: f64,
    /// position cost weight
    pub q1: f64,
    /// velocity cost weight
    pub q2: f64,
    /// control cost weight
    pub r: f64,
    /// action limit; generous so the LQR policy never saturates
    pub u_max: f64,
    /// workspace bound: position and velocity clamp to [-x_max, x_max].
    /// Large enough that closed-loop LQR trajectories from the evaluation
    /// distribution never touch it, so the Riccati solution stays optimal;
    /// it only stops runaway states (and saturated activations) early in
    /// policy-gradient training.
    pub x_max: f64,
    /// episode length [steps]
    pub horizon: usize,
    /// initial states drawn from U(-init_range, init_range) per component
    pub init_range: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        DoubleIntegratorParams {
            dt: 0.1,
            q1: 1.0,
            q2: 0.1,
            r: 0.001,
            u_max: 50.0,
            x_max: 5.0,
            horizon: 200,
            init_range: 1.0,
        }
    }
}

impl DoubleIntegratorParams {
    /// Semi-implicit discretization: velocity updates first, position uses
    /// the new velocity, matching the pendulum integrator.
    pub fn dynamics(&self) -> (Tensor, Tensor) {
        let a = Tensor::from_rows(&[&[1.0, self.dt], &[0.0, 1.0]]);
        let b = Tensor::col(&[self.dt * self.dt, self.dt]);
        (a, b)
    }

    pub fn cost_matrices(&self) -> (Tensor, Tensor) {
        (
            Tensor::from_rows(&[&[self.q1, 0.0], &[0.0, self.q2]]),
            Tensor::scalar(self.r),
        )
    }
}

/// One step of the double integrator; reward is evaluated on the pre-step
/// state and the clipped action.
pub fn double_integrator_step(
    s: [f64; 2],
    u: f64,
    p: &DoubleIntegratorParams,
) -> ([f64; 2], f64) {
    let u = u.clamp(-p.u_max, p.u_max);
    let reward = -(p.q1 * s[0] * s[0] + p.q2 * s[1] * s[1] + p.r * u * u);
    let v = (s[1] + p.dt * u).clamp(-p.x_max, p.x_max);
    let x = (s[0] + p.dt * v).clamp(-p.x_max, p.x_max);
    ([x, v], reward)
}

/// Solves the discounted discrete algebraic Riccati equation
///   P = Q + rho A'PA - rho^2 A'PB (R + rho B'PB)^{-1} B'PA
/// by fixed-point iteration from P = Q.
pub fn solve_dare(
    a: &Tensor,
    b: &Tensor,
    q: &Tensor,
    r: &Tensor,
    discount: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Tensor> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..max_iter {
        let pa = p.matmul(a);
        let pb = p.matmul(b);
        let inner = r.add(&bt.matmul(&pb).scale(discount));
        let x = solve(&inner, &bt.matmul(&pa))?;
        let next = q
            .add(&at.matmul(&pa).scale(discount))
            .sub(&at.matmul(&pb).matmul(&x).scale(discount * discount));
        let delta = next
            .data
            .iter()
            .zip(&p.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        p = next;
        if delta < tol {
            return Ok(p);
        }
    }
    Err(LqrError::NoConvergence { tol, max_iter })
}

/// Stationary gain of the discounted LQR policy u = -Kx.
pub fn lqr_gain(a: &Tensor, b: &Tensor, r: &Tensor, p: &Tensor, discount: f64) -> Result<Tensor> {
    let bt = b.transpose();
    let inner = r.add(&bt.matmul(&p.matmul(b)).scale(discount));
    Ok(solve(&inner, &bt.matmul(&p.matmul(a)))?.scale(discount))
}

#[derive(Debug, Clone)]
pub struct LqrSolution {
    /// Riccati fixed point
    pub p: Tensor,
    /// feedback gain, u = -Kx
    pub k: Tensor,
    /// mean discounted return of the LQR policy over the evaluation
    /// initial-state distribution (negative of the mean cost)
    pub mean_return: f64,
}

/// Mean discounted return of the linear policy u = -Kx by exact rollout.
pub fn rollout_linear_policy(
    p: &DoubleIntegratorParams,
    k: &Tensor,
    eval_seed: u64,
    episodes: usize,
) -> f64 {
    let task = DoubleIntegratorTask { params: *p };
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed.wrapping_add(ep as u64));
        let mut s = task.reset(&mut rng);
        let mut disc = 1.0;
        for _ in 0..p.horizon {
            let u = -(k.get(0, 0) * s[0] + k.get(0, 1) * s[1]);
            let (next, reward) = double_integrator_step(s, u, p);
            total += disc * reward;
            disc *= DISCOUNT;
            s = next;
        }
    }
    total / episodes as f64
}

/// Optimal cost oracle: Riccati fixed point to 1e-12, then exact rollout of
/// the stationary LQR policy over `episodes` seeded initial states.
pub fn lqr_oracle(
    p: &DoubleIntegratorParams,
    eval_seed: u64,
    episodes: usize,
) -> Result<LqrSolution> {
    let (a, b) = p.dynamics();
    let (q, r) = p.cost_matrices();
    let riccati = solve_dare(&a, &b, &q, &r, DISCOUNT, 1e-12, 200_000)?;
    let k = lqr_gain(&a, &b, &r, &riccati, DISCOUNT)?;
    let mean_return = rollout_linear_policy(p, &k, eval_seed, episodes);
    Ok(LqrSolution { p: riccati, k, mean_return })
}

#[derive(Debug, Clone)]
pub struct DoubleIntegratorTask {
    pub params: DoubleIntegratorParams,
}

impl ControlTask for DoubleIntegratorTask {
    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn action_limit(&self) -> f64 {
        self.params.u_max
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let r = self.params.init_range;
        [rng.gen_range(-r..r), rng.gen_range(-r..r)]
    }

    fn step(&self, s: [f64; 2], u: f64, _rng: &mut ChaCha8Rng) -> ([f64; 2], f64) {
        double_integrator_step(s, u, &self.params)
    }
}
