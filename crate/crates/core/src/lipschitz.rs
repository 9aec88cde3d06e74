//! Empirical lower bounds on the Lipschitz constant via projected gradient
//! ascent on the deviation ratio ||k(x+v) - k(x)|| / ||v||, plus local
//! Lipschitz landscape maps over a phase-space grid.

use crate::graph::{Graph, GraphError};
use crate::layers::DerivedNet;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LipError {
    #[error("perturbation budget must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("degenerate domain box: {0}")]
    BadDomain(String),
    #[error("grid resolution must be at least 2x2")]
    BadGrid,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, LipError>;

/// Axis-aligned box in input space.
#[derive(Debug, Clone)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(LipError::BadDomain("lo/hi length mismatch".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(LipError::BadDomain(format!("{lo:?}..{hi:?}")));
        }
        Ok(DomainBox { lo, hi })
    }

    /// Default phase-space box for the pendulum: angle in [-pi, pi],
    /// velocity in [-8, 8] rad/s.
    pub fn pendulum() -> Self {
        use std::f64::consts::PI;
        DomainBox { lo: vec![-PI, -8.0], hi: vec![PI, 8.0] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn clamp(&self, x: &mut Tensor) {
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(self.dim(), 1, |i, _| rng.gen_range(self.lo[i]..self.hi[i]))
    }

    fn contains(&self, x: &Tensor) -> bool {
        x.data
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] - 1e-12 && v <= self.hi[i] + 1e-12)
    }
}

#[derive(Debug, Clone)]
pub struct LipConfig {
    pub epsilon: f64,
    pub restarts: usize,
    pub iters: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for LipConfig {
    fn default() -> Self {
        LipConfig { epsilon: 0.1, restarts: 20, iters: 500, step: 0.01, seed: 0 }
    }
}

/// Result of a lower-bound search.
#[derive(Debug, Clone)]
pub struct LipEstimate {
    pub lower_bound: f64,
    pub x: Tensor,
    pub v: Tensor,
    pub restarts: usize,
    pub iterations: usize,
    /// lower_bound / certified upper bound when the latter is known
    pub tightness: Option<f64>,
    /// set when the network appears constant on the domain (ratio stayed 0)
    pub constant_flag: bool,
}

/// Floor on ||v||: the ratio gradient is ill-conditioned as v -> 0.
const V_FLOOR: f64 = 1e-6;

fn project_v(v: &mut Tensor, epsilon: f64) {
    let n = v.l2_norm();
    if n > epsilon {
        let s = epsilon / n;
        for e in v.data.iter_mut() {
            *e *= s;
        }
    } else if n < V_FLOOR {
        if n == 0.0 {
            v.data[0] = V_FLOOR;
        } else {
            let s = V_FLOOR / n;
            for e in v.data.iter_mut() {
                *e *= s;
            }
        }
    }
}

/// Squared deviation ratio and its gradients wrt x and v.
fn ratio_and_grads(
    net: &DerivedNet,
    x: &Tensor,
    v: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let vn = g.leaf(v.clone());
    let xv = g.add(xn, vn)?;
    let y1 = net.forward_graph(&mut g, xv).map_err(|e| match e {
        crate::layers::LayerError::Graph(ge) => LipError::Graph(ge),
        other => LipError::BadDomain(other.to_string()),
    })?;
    let y0 = net.forward_graph(&mut g, xn).map_err(|e| match e {
        crate::layers::LayerError::Graph(ge) => LipError::Graph(ge),
        other => LipError::BadDomain(other.to_string()),
    })?;
    let diff = g.sub(y1, y0)?;
    let d2 = g.square(diff)?;
    let num = g.sum(d2)?;
    let v2 = g.square(vn)?;
    let den = g.sum(v2)?;
    let obj = g.div(num, den)?;
    let grads = g.backward(obj, &Tensor::scalar(1.0))?;
    let gx = grads.get_or_zeros(xn, x.rows, 1);
    let gv = grads.get_or_zeros(vn, v.rows, 1);
    Ok((g.value(obj).as_scalar(), gx, gv))
}

fn ascend(
    net: &DerivedNet,
    domain: &DomainBox,
    cfg: &LipConfig,
    restart: usize,
    optimize_x: bool,
    x0: Option<&Tensor>,
) -> Result<(f64, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ restart as u64);
    let mut x = match x0 {
        Some(t) => t.clone(),
        None => domain.sample(&mut rng),
    };
    let mut v = Tensor::from_fn(domain.dim(), 1, |_, _| rng.gen_range(-1.0..1.0));
    let n = v.l2_norm();
    let radius = cfg.epsilon * rng.gen_range(0.1..1.0f64);
    v = v.scale(radius.max(V_FLOOR) / n.max(1e-300));

    let mut best = (0.0f64, x.clone(), v.clone());
    let mut step = cfg.step;
    for it in 0..cfg.iters {
        if it == cfg.iters / 2 {
            step *= 0.1; // decay for the polish phase
        }
        let (obj, gx, gv) = ratio_and_grads(net, &x, &v)?;
        if obj > best.0 {
            best = (obj, x.clone(), v.clone());
        }
        let gn = gv.l2_norm();
        if gn > 0.0 {
            v.add_assign(&gv.scale(step * cfg.epsilon / gn));
        }
        project_v(&mut v, cfg.epsilon);
        if optimize_x {
            let gxn = gx.l2_norm();
            if gxn > 0.0 {
                x.add_assign(&gx.scale(step / gxn));
            }
            domain.clamp(&mut x);
        }
    }
    let (obj, _, _) = ratio_and_grads(net, &best.1, &best.2)?;
    debug_assert!(obj >= best.0 * (1.0 - 1e-12));
    Ok((best.0, best.1, best.2))
}

/// Empirical lower Lipschitz bound by multi-restart projected gradient ascent
/// jointly over the base point x (in `domain`) and the perturbation v (in the
/// l2 ball of radius epsilon). Deterministic given the config seed.
pub fn empirical_lower_bound(
    net: &DerivedNet,
    domain: &DomainBox,
    cfg: &LipConfig,
    certified: Option<f64>,
) -> Result<LipEstimate> {
    if cfg.epsilon <= 0.0 {
        return Err(LipError::BadEpsilon(cfg.epsilon));
    }
    let results: Vec<_> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| ascend(net, domain, cfg, r, true, None))
        .collect::<Result<Vec<_>>>()?;
    let mut best: (f64, Tensor, Tensor) = (0.0, domain.sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed)), Tensor::zeros(domain.dim(), 1));
    for r in results {
        if r.0 > best.0 {
            best = r;
        }
    }
    let lower = best.0.sqrt();
    debug_assert!(domain.contains(&best.1));
    Ok(LipEstimate {
        lower_bound: lower,
        x: best.1,
        v: best.2,
        restarts: cfg.restarts,
        iterations: cfg.iters,
        tightness: certified.map(|c| lower / c),
        constant_flag: lower == 0.0,
    })
}

/// Phase-space grid: `count` evenly spaced points from lo to hi inclusive.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub alpha: (f64, f64, usize),
    pub alpha_dot: (f64, f64, usize),
}

pub fn grid_axis(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Local Lipschitz map: for each grid cell the lower bound with x fixed to
/// the cell center (only v is optimized). Rows index alpha, columns index
/// alpha_dot.
pub fn local_lipschitz_grid(
    net: &DerivedNet,
    grid: &GridSpec,
    cfg: &LipConfig,
) -> Result<Tensor> {
    if grid.alpha.2 < 2 || grid.alpha_dot.2 < 2 {
        return Err(LipError::BadGrid);
    }
    if cfg.epsilon <= 0.0 {
        return Err(LipError::BadEpsilon(cfg.epsilon));
    }
    let alphas = grid_axis(grid.alpha.0, grid.alpha.1, grid.alpha.2);
    let dots = grid_axis(grid.alpha_dot.0, grid.alpha_dot.1, grid.alpha_dot.2);
    let domain = DomainBox::new(
        vec![grid.alpha.0, grid.alpha_dot.0],
        vec![grid.alpha.1, grid.alpha_dot.1],
    )?;
    let cells: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|i| (0..dots.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let x0 = Tensor::col(&[alphas[i], dots[j]]);
            let mut best = 0.0f64;
            for r in 0..cfg.restarts {
                let cell_cfg = LipConfig {
                    seed: cfg.seed ^ ((i as u64) << 32 | j as u64),
                    ..cfg.clone()
                };
                let (obj, _, _) = ascend(net, &domain, &cell_cfg, r, false, Some(&x0))?;
                best = best.max(obj);
            }
            Ok(best.sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(alphas.len(), dots.len());
    for (k, &(i, j)) in cells.iter().enumerate() {
        out.set(i, j, values[k]);
    }
    Ok(out)
}
