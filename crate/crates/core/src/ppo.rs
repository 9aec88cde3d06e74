//! PPO trainer with a Gaussian policy head over a (possibly Lipschitz
//! constrained) mean network.
//!
//! Constrained architectures keep their certified bound through training by
//! construction: the optimizer only ever touches free parameters, and every
//! loss evaluation re-derives the constrained weights on the tape.

use crate::env::{ControlTask, DISCOUNT};
use crate::graph::{Gradients, Graph, GraphError, NodeId};
use crate::layers::{LayerError, PolicyNetwork};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    BadConfig(String),
    #[error("advantages must be normalized exactly once before the loss (normalized: {0})")]
    Normalization(bool),
    #[error("non-finite loss at update {update}; diagnostic checkpoint attached")]
    NonFinite { update: usize, checkpoint: Box<GaussianPolicyHead> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PPOConfig {
    /// parallel environments per rollout
    pub n_envs: usize,
    /// rollout length (equals the episode horizon for fixed-horizon tasks)
    pub t_rollout: usize,
    /// total environment steps across training
    pub total_steps: usize,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// linearly decay both learning rates to zero over the step budget
    pub lr_anneal: bool,
    pub log_std_init: f64,
    pub eval_episodes: usize,
    /// deterministic evaluation every this many updates (0 = final only)
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            n_envs: 64,
            t_rollout: 200,
            total_steps: 2_000_000,
            discount: DISCOUNT,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 1024,
            lr_policy: 3e-4,
            lr_value: 3e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            lr_anneal: false,
            log_std_init: -0.5,
            eval_episodes: 128,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.discount > 0.0
            && self.discount <= 1.0
            && self.gae_lambda > 0.0
            && self.gae_lambda <= 1.0
            && self.clip > 0.0
            && self.clip < 1.0
            && self.n_envs > 0
            && self.t_rollout > 0
            && self.total_steps > 0
            && self.epochs > 0
            && self.minibatch > 0
            && self.lr_policy > 0.0
            && self.lr_value > 0.0
            && self.value_coef >= 0.0
            // entropy_coef may be negative: a penalty decays exploration noise
            && self.entropy_coef.is_finite()
            && self.max_grad_norm > 0.0
            && self.eval_episodes > 0;
        if ok {
            Ok(())
        } else {
            Err(PpoError::BadConfig(
                "require discount, lambda in (0,1], clip in (0,1), positive counts and rates"
                    .into(),
            ))
        }
    }
}

/// Gaussian policy: mean from the network, state-independent log-std.
/// Lipschitz certification applies to the mean network only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPolicyHead {
    pub mean: PolicyNetwork,
    pub log_std: f64,
}

impl GaussianPolicyHead {
    pub fn new(mean: PolicyNetwork, log_std: f64) -> Self {
        GaussianPolicyHead { mean, log_std }
    }

    pub fn log_prob(&self, action: f64, mean: f64) -> f64 {
        let z = (action - mean) * (-self.log_std).exp();
        -0.5 * z * z - self.log_std - 0.5 * LN_2PI
    }
}

/// One rollout's transitions, env-major: index = env * t_rollout + t.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    /// 2 x (n_envs * t_rollout), column per transition
    pub observations: Tensor,
    /// unclipped sampled actions
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// value predictions, env-major with one bootstrap per env appended at
    /// index env * (t_rollout + 1) + t
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub n_envs: usize,
    pub t_rollout: usize,
    pub normalized: bool,
}

/// Generalized advantage estimation for one episode; `values` carries the
/// bootstrap prediction at index T.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_max = rewards.len();
    assert_eq!(values.len(), t_max + 1, "values must include the bootstrap");
    assert_eq!(dones.len(), t_max);
    let mut advantages = vec![0.0; t_max];
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discount * values[t + 1] * cont - values[t];
        acc = delta + discount * lambda * cont * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.n_envs * self.t_rollout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fills advantages and returns env by env.
    pub fn compute_gae(&mut self, discount: f64, lambda: f64) {
        self.advantages.clear();
        self.returns.clear();
        for e in 0..self.n_envs {
            let r = &self.rewards[e * self.t_rollout..(e + 1) * self.t_rollout];
            let v = &self.values[e * (self.t_rollout + 1)..(e + 1) * (self.t_rollout + 1)];
            let d = &self.dones[e * self.t_rollout..(e + 1) * self.t_rollout];
            let (a, ret) = gae(r, v, d, discount, lambda);
            self.advantages.extend(a);
            self.returns.extend(ret);
        }
    }

    /// Zero-mean unit-variance advantages; valid exactly once per batch.
    pub fn normalize_advantages(&mut self) -> Result<()> {
        if self.normalized {
            return Err(PpoError::Normalization(true));
        }
        let n = self.advantages.len() as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
        self.normalized = true;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossComponents {
    pub total: f64,
    /// clipped surrogate E[min(r A, clip(r) A)] (pre-negation)
    pub surrogate: f64,
    pub value_mse: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

#[derive(Debug)]
pub struct LossGrads {
    pub components: LossComponents,
    pub policy: Vec<f64>,
    pub log_std: f64,
    pub value: Vec<f64>,
}

/// PPO loss and its gradients on the selected transitions:
///   L = -E[min(r A, clip(r, 1 +/- eps) A)] + c_v E[(V - returns)^2] - c_e H.
/// Requires normalized advantages. A non-finite ratio signals a diverged
/// policy and surfaces as a graph error.
pub fn ppo_loss(
    batch: &RolloutBatch,
    idx: &[usize],
    policy: &GaussianPolicyHead,
    value: &PolicyNetwork,
    cfg: &PPOConfig,
) -> Result<LossGrads> {
    if !batch.normalized {
        return Err(PpoError::Normalization(false));
    }
    let b = idx.len();
    let gather_row = |src: &[f64]| Tensor::from_fn(1, b, |_, j| src[idx[j]]);
    let obs = Tensor::from_fn(2, b, |i, j| batch.observations.get(i, idx[j]));

    let mut g = Graph::new();
    let pnet = policy.mean.graph_net(&mut g)?;
    let log_std = g.leaf(Tensor::scalar(policy.log_std));
    let vnet = value.graph_net(&mut g)?;

    let obs_n = g.constant(obs);
    let act_n = g.constant(gather_row(&batch.actions));
    let logp_old_n = g.constant(gather_row(&batch.log_probs));
    let adv_n = g.constant(gather_row(&batch.advantages));
    let ret_n = g.constant(gather_row(&batch.returns));
    let ones = g.constant(Tensor::from_fn(1, b, |_, _| 1.0));

    // log pi(u | x) = -z^2/2 - log_std - ln(2 pi)/2, z = (u - mean)/std
    let mean = pnet.forward(&mut g, obs_n)?;
    let diff = g.sub(act_n, mean)?;
    let neg_ls = g.scale(log_std, -1.0)?;
    let inv_std = g.exp(neg_ls)?;
    let z = g.scale_by_node(diff, inv_std)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, -0.5)?;
    let shifted = g.add_const(half, -0.5 * LN_2PI)?;
    let ls_row = g.scale_by_node(ones, log_std)?;
    let logp = g.sub(shifted, ls_row)?;

    let dlp = g.sub(logp, logp_old_n)?;
    let ratio = g.exp(dlp)?;
    let surr1 = g.mul(ratio, adv_n)?;
    let clipped = g.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let surr2 = g.mul(clipped, adv_n)?;
    let surr = g.min_elem(surr1, surr2)?;
    let surrogate = g.mean(surr)?;
    let policy_loss = g.scale(surrogate, -1.0)?;

    let v = vnet.forward(&mut g, obs_n)?;
    let verr = g.sub(v, ret_n)?;
    let vsq = g.square(verr)?;
    let value_mse = g.mean(vsq)?;

    // Gaussian entropy = log_std + (1 + ln 2 pi)/2
    let entropy = g.add_const(log_std, 0.5 * (1.0 + LN_2PI))?;

    let vterm = g.scale(value_mse, cfg.value_coef)?;
    let total = g.add(policy_loss, vterm)?;
    let total = if cfg.entropy_coef != 0.0 {
        let eterm = g.scale(entropy, cfg.entropy_coef)?;
        g.sub(total, eterm)?
    } else {
        total
    };

    let clip_fraction = {
        let r = g.value(ratio);
        r.data.iter().filter(|&&x| (x - 1.0).abs() > cfg.clip).count() as f64 / b as f64
    };
    let components = LossComponents {
        total: g.value(total).as_scalar(),
        surrogate: g.value(surrogate).as_scalar(),
        value_mse: g.value(value_mse).as_scalar(),
        entropy: g.value(entropy).as_scalar(),
        clip_fraction,
    };

    let grads = g.backward(total, &Tensor::scalar(1.0))?;
    let collect = |nodes: &[NodeId], net: &PolicyNetwork, grads: &Gradients| {
        let mut flat = Vec::with_capacity(net.param_count());
        for (node, p) in nodes.iter().zip(net.flat_params()) {
            flat.extend(grads.get_or_zeros(*node, p.rows, p.cols).data);
        }
        flat
    };
    Ok(LossGrads {
        components,
        policy: collect(&pnet.param_nodes, &policy.mean, &grads),
        log_std: grads.get_or_zeros(log_std, 1, 1).as_scalar(),
        value: collect(&vnet.param_nodes, value, &grads),
    })
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scales `grads` in place so the global l2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

pub fn read_flat(net: &PolicyNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for p in net.flat_params() {
        out.extend_from_slice(&p.data);
    }
    out
}

pub fn write_flat(net: &mut PolicyNetwork, flat: &[f64]) {
    let mut offset = 0;
    for p in net.flat_params_mut() {
        let len = p.data.len();
        p.data.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    assert_eq!(offset, flat.len());
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: usize,
    /// mean discounted return of the collected (stochastic) episodes
    pub mean_episode_return: f64,
    pub surrogate: f64,
    pub value_mse: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub eval_return: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub policy: GaussianPolicyHead,
    pub value: PolicyNetwork,
    pub metrics: Vec<UpdateMetrics>,
    pub final_eval: f64,
}

/// Collects one batch: every env runs a full fixed-horizon episode with the
/// current stochastic policy. RNG streams are owned by the caller so batches
/// differ across updates while the whole run stays deterministic.
pub fn collect_rollouts(
    task: &dyn ControlTask,
    policy: &GaussianPolicyHead,
    value: &PolicyNetwork,
    n_envs: usize,
    env_rngs: &mut [ChaCha8Rng],
    action_rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let t_rollout = task.horizon();
    let total = n_envs * t_rollout;
    let derived = policy.mean.derive()?;
    let value_net = value.derive()?;
    let std = policy.log_std.exp();

    let mut states: Vec<[f64; 2]> =
        env_rngs.iter_mut().take(n_envs).map(|rng| task.reset(rng)).collect();
    let mut batch = RolloutBatch {
        observations: Tensor::zeros(2, total),
        actions: vec![0.0; total],
        log_probs: vec![0.0; total],
        rewards: vec![0.0; total],
        values: vec![0.0; n_envs * (t_rollout + 1)],
        dones: vec![false; total],
        advantages: Vec::new(),
        returns: Vec::new(),
        n_envs,
        t_rollout,
        normalized: false,
    };
    for t in 0..t_rollout {
        let obs = Tensor::from_fn(2, n_envs, |i, e| states[e][i]);
        let means = derived.forward(&obs);
        let vals = value_net.forward(&obs);
        for e in 0..n_envs {
            let idx = e * t_rollout + t;
            let mean = means.get(0, e);
            let u = mean + std * crate::env::gaussian(action_rng);
            batch.observations.set(0, idx, states[e][0]);
            batch.observations.set(1, idx, states[e][1]);
            batch.actions[idx] = u;
            batch.log_probs[idx] = policy.log_prob(u, mean);
            batch.values[e * (t_rollout + 1) + t] = vals.get(0, e);
            let (next, r) = task.step(states[e], u, &mut env_rngs[e]);
            batch.rewards[idx] = r;
            batch.dones[idx] = t == t_rollout - 1;
            states[e] = next;
        }
    }
    let obs = Tensor::from_fn(2, n_envs, |i, e| states[e][i]);
    let boot = value_net.forward(&obs);
    for e in 0..n_envs {
        batch.values[e * (t_rollout + 1) + t_rollout] = boot.get(0, e);
    }
    Ok(batch)
}

/// Mean discounted return of the deterministic policy (action = mean) over
/// seeded evaluation episodes.
pub fn evaluate(task: &dyn ControlTask, policy: &PolicyNetwork, episodes: usize, seed: u64) -> f64 {
    let net = policy.derive().expect("evaluation of an underivable network");
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ep as u64));
        let mut s = task.reset(&mut rng);
        let mut disc = 1.0;
        for _ in 0..task.horizon() {
            let u = net.forward(&Tensor::col(&s)).as_scalar();
            let (next, r) = task.step(s, u, &mut rng);
            total += disc * r;
            disc *= DISCOUNT;
            s = next;
        }
    }
    total / episodes as f64
}

/// Runs PPO to the configured step budget. `on_update` sees every metrics
/// record as it is produced (for streaming logs); pass `|_| {}` to ignore.
pub fn train(
    task: &dyn ControlTask,
    mut policy: GaussianPolicyHead,
    mut value: PolicyNetwork,
    cfg: &PPOConfig,
    mut on_update: impl FnMut(&UpdateMetrics),
) -> Result<TrainResult> {
    cfg.validate()?;
    let t_rollout = task.horizon();
    let steps_per_update = cfg.n_envs * t_rollout;
    let updates = cfg.total_steps.div_ceil(steps_per_update);
    let started = Instant::now();

    let mut env_rngs: Vec<ChaCha8Rng> = (0..cfg.n_envs)
        .map(|e| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ e as u64))
        .collect();
    let mut action_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bf0_3635);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x94d0_49bb);
    let eval_seed = cfg.seed ^ 0x2545_f491;

    let mut policy_opt = Adam::new(policy.mean.param_count() + 1, cfg.lr_policy);
    let mut value_opt = Adam::new(value.param_count(), cfg.lr_value);
    let mut metrics = Vec::with_capacity(updates);

    for update in 0..updates {
        if cfg.lr_anneal {
            let frac = 1.0 - update as f64 / updates as f64;
            policy_opt.set_lr(cfg.lr_policy * frac);
            value_opt.set_lr(cfg.lr_value * frac);
        }
        let mut batch =
            collect_rollouts(task, &policy, &value, cfg.n_envs, &mut env_rngs, &mut action_rng)?;
        batch.compute_gae(cfg.discount, cfg.gae_lambda);
        batch.normalize_advantages()?;

        let mean_episode_return = (0..cfg.n_envs)
            .map(|e| {
                let mut disc = 1.0;
                batch.rewards[e * t_rollout..(e + 1) * t_rollout]
                    .iter()
                    .map(|r| {
                        let v = disc * r;
                        disc *= cfg.discount;
                        v
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / cfg.n_envs as f64;

        let mut last = None;
        let mut grad_norm_acc = 0.0;
        let mut passes = 0usize;
        let mut indices: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..cfg.epochs {
            indices.shuffle(&mut shuffle_rng);
            for chunk in indices.chunks(cfg.minibatch) {
                let lg = match ppo_loss(&batch, chunk, &policy, &value, cfg) {
                    Ok(lg) if lg.components.total.is_finite() => lg,
                    Ok(_) | Err(PpoError::Graph(GraphError::NonFinite { .. })) => {
                        return Err(PpoError::NonFinite {
                            update,
                            checkpoint: Box::new(policy),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let mut pg = lg.policy.clone();
                pg.push(lg.log_std);
                grad_norm_acc += clip_grad_norm(&mut pg, cfg.max_grad_norm);
                passes += 1;
                let mut pparams = read_flat(&policy.mean);
                pparams.push(policy.log_std);
                policy_opt.step(&mut pparams, &pg);
                policy.log_std = pparams.pop().unwrap();
                write_flat(&mut policy.mean, &pparams);

                let mut vg = lg.value.clone();
                clip_grad_norm(&mut vg, cfg.max_grad_norm);
                let mut vparams = read_flat(&value);
                value_opt.step(&mut vparams, &vg);
                write_flat(&mut value, &vparams);
                last = Some(lg.components);
            }
        }
        let comp = last.expect("at least one minibatch per update");
        let eval_return = if cfg.eval_every > 0 && (update + 1) % cfg.eval_every == 0 {
            Some(evaluate(task, &policy.mean, cfg.eval_episodes, eval_seed))
        } else {
            None
        };
        let record = UpdateMetrics {
            update,
            env_steps: (update + 1) * steps_per_update,
            mean_episode_return,
            surrogate: comp.surrogate,
            value_mse: comp.value_mse,
            entropy: comp.entropy,
            grad_norm: grad_norm_acc / passes as f64,
            clip_fraction: comp.clip_fraction,
            eval_return,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_update(&record);
        metrics.push(record);
    }
    let final_eval = evaluate(task, &policy.mean, cfg.eval_episodes, eval_seed);
    Ok(TrainResult { policy, value, metrics, final_eval })
}

/// Standard value network: plain MLP with four tanh hidden layers of 64.
pub fn default_value_net(seed: u64) -> PolicyNetwork {
    crate::layers::build_policy(
        crate::layers::Architecture::Plain,
        &[2, 64, 64, 64, 64, 1],
        None,
        seed ^ 0x7a1e_55ed,
    )
    .expect("plain value network construction cannot fail")
}
