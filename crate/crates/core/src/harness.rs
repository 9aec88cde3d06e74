//! Experiment orchestration: trains (architecture, gamma, seed) cells,
//! evaluates them under delays, noise, and trajectory attacks, estimates
//! Lipschitz lower bounds, and aggregates everything into CSV/SVG reports.
//!
//! Every run owns a directory under `<out>/cells/`; a manifest at the output
//! root records per-run config and checkpoint hashes so interrupted sweeps
//! resume without retraining and corrupted cells are detected and redone.

use crate::attack::{trajectory_attack, AttackSpec};
use crate::env::{
    rollout, sample_initial_state, stabilized, ActionMode, PendulumParams, PendulumTask,
    Perturbation,
};
use crate::layers::{build_policy, Architecture, DerivedNet};
use crate::lipschitz::{empirical_lower_bound, DomainBox, GridSpec, LipConfig};
use crate::ppo::{self, GaussianPolicyHead, PPOConfig};
use crate::report::{self, Series};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed artifact {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Layer(#[from] crate::layers::LayerError),
    #[error(transparent)]
    Ppo(#[from] crate::ppo::PpoError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error(transparent)]
    Lipschitz(#[from] crate::lipschitz::LipError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// full dimension chain override; defaults per architecture
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

impl CellSpec {
    pub fn new(architecture: Architecture, gamma: Option<f64>) -> Self {
        CellSpec { architecture, gamma, widths: None }
    }

    pub fn id(&self) -> String {
        match self.gamma {
            Some(g) => format!("{}_g{}", self.architecture, g),
            None => self.architecture.to_string(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        if let Some(w) = &self.widths {
            return w.clone();
        }
        match self.architecture {
            Architecture::Sandwich => vec![2, 21, 21, 21, 1],
            _ => vec![2, 32, 32, 32, 1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: String,
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
    pub ppo: PPOConfig,
    pub pendulum: PendulumParams,
    pub eval_episodes: usize,
    pub delay_grid: Vec<usize>,
    pub noise_epsilons: Vec<f64>,
    pub attack_epsilons: Vec<f64>,
    pub attack_episodes: usize,
    /// gradient-descent iterations per attack window
    pub attack_steps: usize,
    pub failure_threshold: f64,
    pub lipschitz_restarts: usize,
    pub lipschitz_iters: usize,
    /// side length of the policy-action contour grid
    pub contour_resolution: usize,
    /// side length of the local-Lipschitz grid
    pub local_grid_resolution: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cells = vec![CellSpec::new(Architecture::Plain, None)];
        for gamma in [3.0, 4.0, 6.0, 8.0, 12.0, 16.0] {
            cells.push(CellSpec::new(Architecture::Sandwich, Some(gamma)));
        }
        // 1M steps with heavy sample reuse and lr annealing stabilizes the
        // swing-up far more reliably than the trainer's 2M-step default.
        // The small entropy penalty decays exploration noise late in
        // training; with a zero coefficient the clipped surrogate inflates
        // the action std toward the torque limit on this task, which blurs
        // the learned mean and leaves the upright hold imprecise.
        let ppo = PPOConfig {
            total_steps: 1_000_000,
            epochs: 16,
            lr_anneal: true,
            entropy_coef: -0.01,
            ..PPOConfig::default()
        };
        ExperimentConfig {
            task: "pendulum".into(),
            cells,
            seeds: (0..10).collect(),
            ppo,
            pendulum: PendulumParams::default(),
            eval_episodes: 128,
            delay_grid: (0..=8).collect(),
            noise_epsilons: vec![0.05, 0.1, 0.2],
            attack_epsilons: vec![0.05, 0.11, 0.2, 0.4],
            attack_episodes: 8,
            attack_steps: 200,
            failure_threshold: -400.0,
            lipschitz_restarts: 20,
            lipschitz_iters: 500,
            contour_resolution: 101,
            local_grid_resolution: 21,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task != "pendulum" {
            return Err(HarnessError::BadConfig(format!("unknown task '{}'", self.task)));
        }
        if self.cells.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::BadConfig("need at least one cell and one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(HarnessError::BadConfig("seeds must be distinct".into()));
        }
        self.pendulum.validate()?;
        for cell in &self.cells {
            // surfaces gamma/architecture mismatches before any training
            build_policy(cell.architecture, &cell.widths(), cell.gamma, 0)?;
        }
        Ok(())
    }

    pub fn runs(&self) -> Vec<(CellSpec, u64)> {
        let mut out = Vec::new();
        for cell in &self.cells {
            for &seed in &self.seeds {
                out.push((cell.clone(), seed));
            }
        }
        out
    }
}

pub fn run_id(cell: &CellSpec, seed: u64) -> String {
    format!("{}_s{seed}", cell.id())
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, RunManifest>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default)]
    pub checkpoint_hash: String,
    /// completed stage -> parameter hash it was computed with
    #[serde(default)]
    pub stages: BTreeMap<String, String>,
}

pub fn fnv1a64(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Manifest {
        let path = out_dir.join("manifest.json");
        fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(io_err(&path))
    }
}

/// Per-stage parameter hash: a stage is current iff its recorded hash
/// matches. A stale "train" hash invalidates every stage; stale downstream
/// stages only re-run themselves against the existing checkpoint.
fn stage_hash(cfg: &ExperimentConfig, cell: &CellSpec, seed: u64, stage: &str) -> String {
    let key = match stage {
        "train" => serde_json::to_string(&(cell, seed, &cfg.ppo, &cfg.pendulum)).unwrap(),
        "evaluate" => format!(
            "{}|{:?}|{:?}",
            cfg.eval_episodes, cfg.delay_grid, cfg.noise_epsilons
        ),
        "attack" => format!(
            "{:?}|{}|{}",
            cfg.attack_epsilons, cfg.attack_episodes, cfg.attack_steps
        ),
        "lipschitz" => format!("{}|{}", cfg.lipschitz_restarts, cfg.lipschitz_iters),
        _ => unreachable!(),
    };
    fnv1a64(key.as_bytes())
}

// ---------------------------------------------------------------------------
// per-run results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    /// sample standard deviation (n-1)
    pub std: f64,
    /// fraction of episodes with |alpha| < 0.2 rad over the final 2 s
    pub stab_tight: f64,
    /// same with the looser 0.3 rad threshold used under attack
    pub stab_loose: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEval {
    pub epsilon: f64,
    pub mean_attacked: f64,
    pub mean_nominal: f64,
    pub stab_loose: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: CellSpec,
    pub seed: u64,
    pub certified: f64,
    /// mean deterministic discounted return reported by the trainer
    pub final_eval: f64,
    pub train_wall_s: f64,
    #[serde(default)]
    pub nominal: Option<EvalStats>,
    #[serde(default)]
    pub delays: Vec<(usize, EvalStats)>,
    #[serde(default)]
    pub noises: Vec<(f64, EvalStats)>,
    #[serde(default)]
    pub attacks: Vec<AttackEval>,
    #[serde(default)]
    pub lipschitz_lower: Option<f64>,
    #[serde(default)]
    pub tightness: Option<f64>,
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Deterministic evaluation of a derived policy under a perturbation family;
/// `pert` receives the episode index so noise streams differ per episode.
pub fn evaluate_pendulum(
    net: &DerivedNet,
    params: &PendulumParams,
    episodes: usize,
    eval_seed: u64,
    pert: impl Fn(u64) -> Perturbation + Sync,
) -> Result<EvalStats> {
    let runs: Vec<(f64, bool, bool)> = (0..episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let traj = rollout(
                net,
                params,
                eval_seed.wrapping_add(ep),
                &pert(ep),
                ActionMode::Deterministic,
                None,
            )?;
            Ok((
                traj.discounted_return,
                stabilized(&traj, 0.2, 40),
                stabilized(&traj, 0.3, 40),
            ))
        })
        .collect::<Result<_>>()?;
    let returns: Vec<f64> = runs.iter().map(|r| r.0).collect();
    Ok(EvalStats {
        mean: returns.iter().sum::<f64>() / returns.len() as f64,
        std: sample_std(&returns),
        stab_tight: runs.iter().filter(|r| r.1).count() as f64 / runs.len() as f64,
        stab_loose: runs.iter().filter(|r| r.2).count() as f64 / runs.len() as f64,
    })
}

fn eval_seed_for(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0xe7a1
}

/// Mean trajectory-attack outcome over seeded episodes at one budget.
pub fn attack_eval(
    net: &DerivedNet,
    params: &PendulumParams,
    epsilon: f64,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<AttackEval> {
    let window_len = params.horizon / 4;
    let runs: Vec<(f64, f64, bool)> = (0..episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ep));
            let start = sample_initial_state(&mut rng);
            let spec = AttackSpec {
                steps,
                windows: 4,
                window_len,
                ..AttackSpec::trajectory(epsilon, seed.wrapping_add(ep))
            };
            let out = trajectory_attack(net, params, start, &spec)?;
            let traj = rollout(
                net,
                params,
                0,
                &Perturbation::FixedAttack(out.perturbations.clone()),
                ActionMode::Deterministic,
                Some(start),
            )?;
            Ok((out.attacked_return, out.nominal_return, stabilized(&traj, 0.3, 40)))
        })
        .collect::<Result<_>>()?;
    let n = runs.len() as f64;
    Ok(AttackEval {
        epsilon,
        mean_attacked: runs.iter().map(|r| r.0).sum::<f64>() / n,
        mean_nominal: runs.iter().map(|r| r.1).sum::<f64>() / n,
        stab_loose: runs.iter().filter(|r| r.2).count() as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, json).map_err(io_err(path))
}

pub struct RunPaths {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub result: PathBuf,
}

pub fn run_paths(out_dir: &Path, cell: &CellSpec, seed: u64) -> RunPaths {
    let dir = out_dir.join("cells").join(run_id(cell, seed));
    RunPaths {
        checkpoint: dir.join("checkpoint.json"),
        metrics: dir.join("metrics.jsonl"),
        result: dir.join("result.json"),
        dir,
    }
}

fn train_stage(cfg: &ExperimentConfig, cell: &CellSpec, seed: u64, paths: &RunPaths) -> Result<String> {
    fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
    let task = PendulumTask::new(cfg.pendulum)?;
    let mean = build_policy(cell.architecture, &cell.widths(), cell.gamma, seed)?;
    let policy = GaussianPolicyHead::new(mean, cfg.ppo.log_std_init);
    let value = ppo::default_value_net(seed);
    let ppo_cfg = PPOConfig { seed, ..cfg.ppo };

    let metrics_file = Mutex::new(
        std::io::BufWriter::new(fs::File::create(&paths.metrics).map_err(io_err(&paths.metrics))?),
    );
    let out = ppo::train(&task, policy, value, &ppo_cfg, |m| {
        use std::io::Write;
        let mut f = metrics_file.lock().unwrap();
        let _ = writeln!(f, "{}", serde_json::to_string(m).unwrap());
    })?;
    drop(metrics_file);

    let checkpoint_json = serde_json::to_string_pretty(&out.policy).unwrap();
    fs::write(&paths.checkpoint, &checkpoint_json).map_err(io_err(&paths.checkpoint))?;
    let result = RunResult {
        cell: cell.clone(),
        seed,
        certified: out.policy.mean.certified_upper_bound()?,
        final_eval: out.final_eval,
        train_wall_s: out.metrics.last().map(|m| m.wall_time_s).unwrap_or(0.0),
        nominal: None,
        delays: Vec::new(),
        noises: Vec::new(),
        attacks: Vec::new(),
        lipschitz_lower: None,
        tightness: None,
    };
    write_json(&paths.result, &result)?;
    Ok(fnv1a64(checkpoint_json.as_bytes()))
}

pub fn load_checkpoint(paths: &RunPaths) -> Result<GaussianPolicyHead> {
    read_json(&paths.checkpoint)
}

fn evaluate_stage(cfg: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<()> {
    let policy: GaussianPolicyHead = load_checkpoint(paths)?;
    let net = policy.mean.derive()?;
    let mut result: RunResult = read_json(&paths.result)?;
    let es = eval_seed_for(seed);
    result.nominal = Some(evaluate_pendulum(&net, &cfg.pendulum, cfg.eval_episodes, es, |_| {
        Perturbation::None
    })?);
    result.delays = cfg
        .delay_grid
        .iter()
        .map(|&k| {
            Ok((
                k,
                evaluate_pendulum(&net, &cfg.pendulum, cfg.eval_episodes, es, |_| {
                    Perturbation::Delay(k)
                })?,
            ))
        })
        .collect::<Result<_>>()?;
    result.noises = cfg
        .noise_epsilons
        .iter()
        .map(|&epsilon| {
            Ok((
                epsilon,
                evaluate_pendulum(&net, &cfg.pendulum, cfg.eval_episodes, es, |ep| {
                    Perturbation::UniformNoise { epsilon, seed: es ^ ep.wrapping_mul(0x51ed) }
                })?,
            ))
        })
        .collect::<Result<_>>()?;
    write_json(&paths.result, &result)
}

fn attack_stage(cfg: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<()> {
    let policy: GaussianPolicyHead = load_checkpoint(paths)?;
    let net = policy.mean.derive()?;
    let mut result: RunResult = read_json(&paths.result)?;
    let es = eval_seed_for(seed) ^ 0xa77c;
    result.attacks = cfg
        .attack_epsilons
        .iter()
        .map(|&epsilon| {
            attack_eval(&net, &cfg.pendulum, epsilon, cfg.attack_episodes, cfg.attack_steps, es)
        })
        .collect::<Result<_>>()?;
    write_json(&paths.result, &result)
}

fn lipschitz_stage(cfg: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<()> {
    let policy: GaussianPolicyHead = load_checkpoint(paths)?;
    let net = policy.mean.derive()?;
    let mut result: RunResult = read_json(&paths.result)?;
    let lip_cfg = LipConfig {
        restarts: cfg.lipschitz_restarts,
        iters: cfg.lipschitz_iters,
        seed: eval_seed_for(seed) ^ 0x11b,
        ..LipConfig::default()
    };
    let certified = policy.mean.certified_upper_bound()?;
    let est = empirical_lower_bound(&net, &DomainBox::pendulum(), &lip_cfg, Some(certified))?;
    result.lipschitz_lower = Some(est.lower_bound);
    result.tightness = est.tightness;
    write_json(&paths.result, &result)
}

pub const STAGES: [&str; 4] = ["train", "evaluate", "attack", "lipschitz"];

/// Runs all missing stages of all runs, resuming from the manifest. Returns
/// the list of run ids that were (re)computed in any stage.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<String>> {
    run_stages(cfg, out_dir, &STAGES)
}

/// Like [`run_experiment`] but restricted to a subset of stages (later
/// stages always imply "train" so checkpoints exist).
pub fn run_stages(cfg: &ExperimentConfig, out_dir: &Path, enabled: &[&str]) -> Result<Vec<String>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join("config.json"), cfg)?;
    let manifest = Mutex::new(Manifest::load(out_dir));
    let touched = Mutex::new(Vec::new());

    let runs = cfg.runs();
    runs.par_iter().try_for_each(|(cell, seed)| -> Result<()> {
        let id = run_id(cell, *seed);
        let paths = run_paths(out_dir, cell, *seed);
        let mut entry = {
            let m = manifest.lock().unwrap();
            m.runs.get(&id).cloned()
        }
        .unwrap_or_default();
        // a stale training recipe or a corrupted checkpoint invalidates the
        // whole run; stale downstream stages only re-run themselves
        let train_hash = stage_hash(cfg, cell, *seed, "train");
        if entry.stages.contains_key("train") {
            let current = entry.stages.get("train") == Some(&train_hash);
            let intact = fs::read_to_string(&paths.checkpoint)
                .map(|text| fnv1a64(text.as_bytes()) == entry.checkpoint_hash)
                .unwrap_or(false);
            if !current || !intact || !paths.result.exists() {
                entry.stages.clear();
                entry.checkpoint_hash.clear();
            }
        }
        let mut changed = false;
        for stage in STAGES {
            let wanted = enabled.contains(&stage) || (stage == "train" && !enabled.is_empty());
            let hash = stage_hash(cfg, cell, *seed, stage);
            if !wanted || entry.stages.get(stage) == Some(&hash) {
                continue;
            }
            match stage {
                "train" => entry.checkpoint_hash = train_stage(cfg, cell, *seed, &paths)?,
                "evaluate" => evaluate_stage(cfg, *seed, &paths)?,
                "attack" => attack_stage(cfg, *seed, &paths)?,
                "lipschitz" => lipschitz_stage(cfg, *seed, &paths)?,
                _ => unreachable!(),
            }
            entry.stages.insert(stage.to_string(), hash);
            changed = true;
            let mut m = manifest.lock().unwrap();
            m.runs.insert(id.clone(), entry.clone());
            m.save(out_dir)?;
        }
        if changed {
            touched.lock().unwrap().push(id);
        }
        Ok(())
    })?;
    Ok(touched.into_inner().unwrap())
}

// ---------------------------------------------------------------------------
// epsilon search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonSearch {
    /// smallest epsilon whose mean reward drops below the threshold; None if
    /// the policy survives the whole grid
    pub epsilon: Option<f64>,
    pub non_monotone: bool,
    pub evaluated: Vec<(f64, f64)>,
}

/// Finds the smallest failing epsilon on an ascending grid, refined by one
/// bisection level between the bracketing grid points. A non-monotone
/// failure pattern is reported and the coarsest failing grid point returned.
pub fn smallest_failing_epsilon(
    grid: &[f64],
    threshold: f64,
    mut eval: impl FnMut(f64) -> f64,
) -> EpsilonSearch {
    assert!(grid.windows(2).all(|w| w[0] < w[1]), "epsilon grid must ascend");
    let rewards: Vec<f64> = grid.iter().map(|&e| eval(e)).collect();
    let mut evaluated: Vec<(f64, f64)> = grid.iter().copied().zip(rewards.iter().copied()).collect();
    let first_fail = rewards.iter().position(|&r| r < threshold);
    let Some(i) = first_fail else {
        return EpsilonSearch { epsilon: None, non_monotone: false, evaluated };
    };
    let non_monotone = rewards[i..].iter().any(|&r| r >= threshold);
    if non_monotone {
        return EpsilonSearch { epsilon: Some(grid[i]), non_monotone, evaluated };
    }
    let epsilon = if i == 0 {
        grid[0]
    } else {
        let mid = 0.5 * (grid[i - 1] + grid[i]);
        let r = eval(mid);
        evaluated.push((mid, r));
        if r < threshold {
            mid
        } else {
            grid[i]
        }
    };
    EpsilonSearch { epsilon: Some(epsilon), non_monotone: false, evaluated }
}

// ---------------------------------------------------------------------------
// aggregation and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub architecture: String,
    pub gamma: Option<f64>,
    pub certified: f64,
    pub mean_lower: f64,
    pub std_lower: f64,
    /// mean empirical lower bound over the certified bound
    pub tightness: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub smallest_failing_epsilon: Option<f64>,
    pub epsilon_non_monotone: bool,
    pub seeds: usize,
}

pub fn load_results(cfg: &ExperimentConfig, out_dir: &Path) -> (Vec<RunResult>, Vec<String>) {
    let mut results = Vec::new();
    let mut missing = Vec::new();
    for (cell, seed) in cfg.runs() {
        let paths = run_paths(out_dir, &cell, seed);
        match read_json::<RunResult>(&paths.result) {
            Ok(r) => results.push(r),
            Err(_) => missing.push(run_id(&cell, seed)),
        }
    }
    (results, missing)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Builds the per-cell summary. The smallest-failing-epsilon refinement
/// needs fresh attack evaluations at bisection midpoints, so checkpoints
/// must still be present.
pub fn summarize(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let (results, _missing) = load_results(cfg, out_dir);
    let mut rows = Vec::new();
    for cell in &cfg.cells {
        let cell_results: Vec<&RunResult> = results.iter().filter(|r| r.cell == *cell).collect();
        if cell_results.is_empty() {
            continue;
        }
        let lowers: Vec<f64> = cell_results.iter().filter_map(|r| r.lipschitz_lower).collect();
        let rewards: Vec<f64> =
            cell_results.iter().filter_map(|r| r.nominal.as_ref().map(|n| n.mean)).collect();
        let certified = mean(&cell_results.iter().map(|r| r.certified).collect::<Vec<_>>());

        // reward at each attack epsilon, averaged over seeds, for the search;
        // midpoints re-attack every seed's checkpoint
        let grid = &cfg.attack_epsilons;
        let mut cache: BTreeMap<u64, f64> = BTreeMap::new();
        for r in &cell_results {
            for a in &r.attacks {
                *cache.entry(a.epsilon.to_bits()).or_insert(0.0) +=
                    a.mean_attacked / cell_results.len() as f64;
            }
        }
        let mut nets = Vec::new();
        for r in &cell_results {
            let paths = run_paths(out_dir, cell, r.seed);
            if let Ok(policy) = load_checkpoint(&paths) {
                nets.push((r.seed, policy.mean.derive()?));
            }
        }
        let search = if grid.is_empty() || cell_results.iter().all(|r| r.attacks.is_empty()) {
            EpsilonSearch { epsilon: None, non_monotone: false, evaluated: Vec::new() }
        } else {
            smallest_failing_epsilon(grid, cfg.failure_threshold, |eps| {
                if let Some(&v) = cache.get(&eps.to_bits()) {
                    return v;
                }
                let vals: Vec<f64> = nets
                    .iter()
                    .map(|(seed, net)| {
                        attack_eval(
                            net,
                            &cfg.pendulum,
                            eps,
                            cfg.attack_episodes,
                            cfg.attack_steps,
                            eval_seed_for(*seed) ^ 0xa77c,
                        )
                        .map(|a| a.mean_attacked)
                        .unwrap_or(f64::NAN)
                    })
                    .collect();
                mean(&vals)
            })
        };
        rows.push(SummaryRow {
            architecture: cell.architecture.to_string(),
            gamma: cell.gamma,
            certified,
            mean_lower: mean(&lowers),
            std_lower: sample_std(&lowers),
            tightness: if certified > 0.0 { mean(&lowers) / certified } else { f64::NAN },
            reward_mean: mean(&rewards),
            reward_std: sample_std(&rewards),
            smallest_failing_epsilon: search.epsilon,
            epsilon_non_monotone: search.non_monotone,
            seeds: cell_results.len(),
        });
    }
    write_json(&out_dir.join("summary.json"), &rows)?;
    Ok(rows)
}

/// Writes CSV tables and SVG plots from completed runs. Missing cells are
/// listed in `missing.json`; reports cover whatever is available.
pub fn make_reports(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let (results, missing) = load_results(cfg, out_dir);
    let reports = out_dir.join("reports");
    fs::create_dir_all(&reports).map_err(io_err(&reports))?;
    write_json(&reports.join("missing.json"), &missing)?;

    let summary: Vec<SummaryRow> = match read_json(&out_dir.join("summary.json")) {
        Ok(rows) => rows,
        Err(_) => summarize(cfg, out_dir)?,
    };
    let fmt_gamma = |g: Option<f64>| g.map(|v| v.to_string()).unwrap_or_else(|| "unconstrained".into());
    report::write_csv(
        &reports.join("summary.csv"),
        &[
            "architecture",
            "gamma",
            "certified",
            "mean_lower",
            "std_lower",
            "tightness",
            "reward_mean",
            "reward_std",
            "smallest_failing_epsilon",
            "epsilon_non_monotone",
            "seeds",
        ],
        &summary
            .iter()
            .map(|r| {
                vec![
                    r.architecture.clone(),
                    fmt_gamma(r.gamma),
                    format!("{}", r.certified),
                    format!("{}", r.mean_lower),
                    format!("{}", r.std_lower),
                    format!("{}", r.tightness),
                    format!("{}", r.reward_mean),
                    format!("{}", r.reward_std),
                    r.smallest_failing_epsilon.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
                    r.epsilon_non_monotone.to_string(),
                    r.seeds.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )
    .map_err(io_err(&reports))?;

    // delay and attack curves: mean +/- std across seeds per cell
    let mut delay_rows = Vec::new();
    let mut attack_rows = Vec::new();
    let mut delay_series = Vec::new();
    let mut attack_series = Vec::new();
    let mut cross_rows = Vec::new();
    for cell in &cfg.cells {
        let cell_results: Vec<&RunResult> = results.iter().filter(|r| r.cell == *cell).collect();
        if cell_results.is_empty() {
            continue;
        }
        let label = cell.id();
        let mut dpts = Vec::new();
        for &k in &cfg.delay_grid {
            let vals: Vec<f64> = cell_results
                .iter()
                .filter_map(|r| r.delays.iter().find(|(kk, _)| *kk == k).map(|(_, s)| s.mean))
                .collect();
            if vals.is_empty() {
                continue;
            }
            delay_rows.push(vec![
                cell.architecture.to_string(),
                fmt_gamma(cell.gamma),
                k.to_string(),
                format!("{}", mean(&vals)),
                format!("{}", sample_std(&vals)),
            ]);
            dpts.push((k as f64, mean(&vals)));
        }
        delay_series.push(Series { label: label.clone(), points: dpts });
        let mut apts = Vec::new();
        for &eps in &cfg.attack_epsilons {
            let vals: Vec<f64> = cell_results
                .iter()
                .filter_map(|r| {
                    r.attacks.iter().find(|a| a.epsilon == eps).map(|a| a.mean_attacked)
                })
                .collect();
            if vals.is_empty() {
                continue;
            }
            attack_rows.push(vec![
                cell.architecture.to_string(),
                fmt_gamma(cell.gamma),
                eps.to_string(),
                format!("{}", mean(&vals)),
                format!("{}", sample_std(&vals)),
            ]);
            apts.push((eps, mean(&vals)));
        }
        attack_series.push(Series { label, points: apts });

        // cross-sections keyed by (gamma, mean lower bound, mean reward, std)
        let lowers: Vec<f64> = cell_results.iter().filter_map(|r| r.lipschitz_lower).collect();
        let mut push_cross = |context: String, vals: Vec<f64>| {
            if !vals.is_empty() {
                cross_rows.push(vec![
                    context,
                    fmt_gamma(cell.gamma),
                    format!("{}", mean(&lowers)),
                    format!("{}", mean(&vals)),
                    format!("{}", sample_std(&vals)),
                ]);
            }
        };
        push_cross(
            "nominal".into(),
            cell_results.iter().filter_map(|r| r.nominal.as_ref().map(|n| n.mean)).collect(),
        );
        push_cross(
            "delay_k2".into(),
            cell_results
                .iter()
                .filter_map(|r| r.delays.iter().find(|(k, _)| *k == 2).map(|(_, s)| s.mean))
                .collect(),
        );
        push_cross(
            "attack_eps0.11".into(),
            cell_results
                .iter()
                .filter_map(|r| {
                    r.attacks.iter().find(|a| (a.epsilon - 0.11).abs() < 1e-12).map(|a| a.mean_attacked)
                })
                .collect(),
        );
    }
    report::write_csv(
        &reports.join("delay_curve.csv"),
        &["architecture", "gamma", "delay_samples", "reward_mean", "reward_std"],
        &delay_rows,
    )
    .map_err(io_err(&reports))?;
    report::write_csv(
        &reports.join("attack_curve.csv"),
        &["architecture", "gamma", "epsilon", "reward_mean", "reward_std"],
        &attack_rows,
    )
    .map_err(io_err(&reports))?;
    report::write_csv(
        &reports.join("cross_section.csv"),
        &["context", "gamma", "mean_lower", "reward_mean", "reward_std"],
        &cross_rows,
    )
    .map_err(io_err(&reports))?;
    fs::write(
        reports.join("delay_curve.svg"),
        report::line_plot("Reward vs. observation delay", "delay [samples]", "mean reward", &delay_series),
    )
    .map_err(io_err(&reports))?;
    fs::write(
        reports.join("attack_curve.svg"),
        report::line_plot("Reward vs. attack budget", "epsilon", "mean reward", &attack_series),
    )
    .map_err(io_err(&reports))?;

    // policy-action contours and local Lipschitz maps for the first seed
    let domain = DomainBox::pendulum();
    for cell in &cfg.cells {
        let seed = cfg.seeds[0];
        let paths = run_paths(out_dir, cell, seed);
        let Ok(policy) = load_checkpoint(&paths) else { continue };
        let net = policy.mean.derive()?;
        let res = cfg.contour_resolution;
        let mut rows_csv = Vec::with_capacity(res * res);
        let mut grid = vec![vec![0.0; res]; res];
        for i in 0..res {
            let ad = domain.lo[1] + (domain.hi[1] - domain.lo[1]) * i as f64 / (res - 1) as f64;
            for j in 0..res {
                let a = domain.lo[0] + (domain.hi[0] - domain.lo[0]) * j as f64 / (res - 1) as f64;
                let u = net.forward(&crate::tensor::Tensor::col(&[a, ad])).as_scalar();
                grid[i][j] = u;
                rows_csv.push(vec![format!("{a}"), format!("{ad}"), format!("{u}")]);
            }
        }
        report::write_csv(
            &reports.join(format!("contour_{}.csv", cell.id())),
            &["alpha", "alpha_dot", "action"],
            &rows_csv,
        )
        .map_err(io_err(&reports))?;
        fs::write(
            reports.join(format!("contour_{}.svg", cell.id())),
            report::heatmap(
                &format!("Policy action: {}", cell.id()),
                "alpha [rad]",
                "alpha_dot [rad/s]",
                &grid,
                (domain.lo[0], domain.hi[0]),
                (domain.lo[1], domain.hi[1]),
            ),
        )
        .map_err(io_err(&reports))?;

        let gres = cfg.local_grid_resolution;
        let spec = GridSpec {
            alpha: (domain.lo[0], domain.hi[0], gres),
            alpha_dot: (domain.lo[1], domain.hi[1], gres),
        };
        let lip_cfg = LipConfig {
            restarts: 3,
            iters: 120,
            seed: eval_seed_for(seed) ^ 0x10ca1,
            ..LipConfig::default()
        };
        // rows index alpha, columns index alpha_dot; the heatmap wants
        // y = alpha_dot rows, so transpose into nested vectors
        let local = crate::lipschitz::local_lipschitz_grid(&net, &spec, &lip_cfg)?;
        let mut rows_csv = Vec::with_capacity(gres * gres);
        let mut local_vv = vec![vec![0.0; gres]; gres];
        for i in 0..gres {
            let a = domain.lo[0] + (domain.hi[0] - domain.lo[0]) * i as f64 / (gres - 1) as f64;
            for j in 0..gres {
                let ad = domain.lo[1] + (domain.hi[1] - domain.lo[1]) * j as f64 / (gres - 1) as f64;
                let v = local.get(i, j);
                local_vv[j][i] = v;
                rows_csv.push(vec![format!("{a}"), format!("{ad}"), format!("{v}")]);
            }
        }
        report::write_csv(
            &reports.join(format!("local_lipschitz_{}.csv", cell.id())),
            &["alpha", "alpha_dot", "local_lower_bound"],
            &rows_csv,
        )
        .map_err(io_err(&reports))?;
        fs::write(
            reports.join(format!("local_lipschitz_{}.svg", cell.id())),
            report::heatmap(
                &format!("Local Lipschitz lower bound: {}", cell.id()),
                "alpha [rad]",
                "alpha_dot [rad/s]",
                &local_vv,
                (domain.lo[0], domain.hi[0]),
                (domain.lo[1], domain.hi[1]),
            ),
        )
        .map_err(io_err(&reports))?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = mean(&rx);
    let my = mean(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}
