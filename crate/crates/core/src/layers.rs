//! Direct parameterizations of plain and Lipschitz-bounded layers, network
//! assembly under a Lipschitz budget, and construction-time certified bounds.
//!
//! All constrained weights are derived from free parameters, so the bound is
//! enforced by construction at every optimizer step (no projection). Each
//! derivation exists twice: a plain-math version for fast rollouts and a
//! graph-recorded version so training gradients flow through the derivation
//! into the free parameters.

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::{self, LinalgError, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("spectral normalization of an all-zero weight")]
    DegenerateWeight,
    #[error("lipschitz budget must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("plain architecture does not take a lipschitz budget")]
    GammaForPlain,
    #[error("constrained architecture requires a lipschitz budget")]
    MissingGamma,
    #[error("invalid widths: {0}")]
    BadWidths(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Tolerance and iteration cap for power iteration in weight derivations.
/// Derivations iterate essentially to convergence so that the constant
/// singular-vector trick gives gradients accurate to finite-difference level.
pub const SN_TOL: f64 = 1e-13;
pub const SN_MAX_ITER: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Plain,
    Sn,
    Aol,
    Cayley,
    Sandwich,
}

impl Architecture {
    pub fn is_constrained(self) -> bool {
        !matches!(self, Architecture::Plain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Plain => "plain",
            Architecture::Sn => "sn",
            Architecture::Aol => "aol",
            Architecture::Cayley => "cayley",
            Architecture::Sandwich => "sandwich",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Architecture::Plain),
            "sn" => Ok(Architecture::Sn),
            "aol" => Ok(Architecture::Aol),
            "cayley" => Ok(Architecture::Cayley),
            "sandwich" => Ok(Architecture::Sandwich),
            other => Err(format!("unknown architecture '{other}'")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn apply_graph(self, g: &mut Graph, x: NodeId) -> crate::graph::Result<NodeId> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Free parameters of one layer. The meaning of `a` depends on the
/// architecture: for plain/SN/AOL it is the out x in free matrix, for Cayley
/// it is the square max(out,in) matrix fed to the Cayley transform, and for
/// the final linear layer of a Sandwich stack it is the out x in free matrix
/// behind the semi-orthogonal parameterization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFree {
    pub a: Tensor,
    pub b: Tensor,
    /// warm start for SN power iteration; never serialized
    #[serde(skip)]
    pub sn_cache: Option<Tensor>,
}

/// Free parameters of a Sandwich layer mapping q inputs to p outputs:
/// `f` (p x (p+q)) parameterizes the semi-orthogonal Q = [A B], `d` is the
/// log of the positive diagonal Psi, `b` the pre-activation bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichFree {
    pub f: Tensor,
    pub d: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerParams {
    Linear(LinearFree),
    Sandwich(SandwichFree),
    /// linear layer with semi-orthogonal (1-Lipschitz) weight; used as the
    /// output layer of Sandwich stacks
    OrthLinear(LinearFree),
}

// ---------------------------------------------------------------------------
// weight derivations, plain math
// ---------------------------------------------------------------------------

/// W = A / rho with rho the largest singular value of A (power iteration).
/// Returns the weight and the converged right singular vector for reuse as a
/// warm start on the next call.
pub fn make_sn_weight(a: &Tensor, start: Option<&Tensor>, tol: f64) -> Result<(Tensor, Tensor)> {
    match tensor::power_iteration(a, start, tol, 1000) {
        Ok((rho, v)) => Ok((a.scale(1.0 / rho), v)),
        Err(LinalgError::ZeroMatrix) => Err(LayerError::DegenerateWeight),
        Err(e) => Err(e.into()),
    }
}

/// W = A D with D_ii = (sum_j |A^T A|_ij)^(-1/2); rows of |A^T A| that sum to
/// zero (all-zero columns of A) get D_ii = 0.
pub fn make_aol_weight(a: &Tensor) -> Tensor {
    let t = a.transpose().matmul(a);
    let n = t.rows;
    let mut d = vec![0.0; n];
    for i in 0..n {
        let s: f64 = t.row_slice(i).iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            d[i] = 1.0 / s.sqrt();
        }
    }
    // column scaling
    Tensor::from_fn(a.rows, a.cols, |i, j| a.get(i, j) * d[j])
}

/// Square orthogonal W0 = (I - A)(I + A)^{-1} with A = P - P^T, then the
/// leading out_dim rows and in_dim cols when a rectangular weight is wanted.
/// Slicing an orthogonal matrix preserves semi-orthogonality of the kept
/// rows/columns.
pub fn make_cayley_weight(p: &Tensor, out_dim: usize, in_dim: usize) -> Result<Tensor> {
    let n = out_dim.max(in_dim);
    if p.rows != n || p.cols != n {
        return Err(LayerError::BadWidths(format!(
            "cayley free matrix must be {n}x{n}, got {:?}",
            p.shape()
        )));
    }
    let a = p.sub(&p.transpose());
    let i = Tensor::eye(n);
    // (I - A)(I + A)^{-1} = (I + A)^{-1}(I - A): polynomials in A commute
    let w0 = tensor::solve(&i.add(&a), &i.sub(&a))?;
    Ok(w0.slice_rows(0, out_dim).slice_cols(0, in_dim))
}

/// Semi-orthogonal Q (p x n, Q Q^T = I_p) from a free p x n matrix, p <= n.
/// Rectangular Cayley: with F^T = [W1; W2] (W1 p x p), Z = W1 - W1^T + W2^T W2,
/// the tall matrix [(I+Z)^{-1}(I-Z); -2 W2 (I+Z)^{-1}] has orthonormal
/// columns; its transpose is Q.
pub fn make_semi_orthogonal(f: &Tensor) -> Result<Tensor> {
    let p = f.rows;
    let n = f.cols;
    if p > n {
        return Err(LayerError::BadWidths(format!(
            "semi-orthogonal free matrix needs rows <= cols, got {:?}",
            f.shape()
        )));
    }
    let ft = f.transpose();
    let w1 = ft.slice_rows(0, p);
    let w2 = ft.slice_rows(p, n - p);
    let z = w1.sub(&w1.transpose()).add(&w2.transpose().matmul(&w2));
    let i = Tensor::eye(p);
    let inv = tensor::solve(&i.add(&z), &i)?;
    let top = i.sub(&z).matmul(&inv);
    let bottom = w2.matmul(&inv).scale(-2.0);
    Ok(top.concat_rows(&bottom).transpose())
}

/// Output of one Sandwich layer: sqrt(2) A^T Psi sigma(sqrt(2) Psi^{-1} B x + b).
pub fn sandwich_forward(
    a: &Tensor,
    bmat: &Tensor,
    psi: &Tensor,
    bias: &Tensor,
    activation: Activation,
    x: &Tensor,
) -> Tensor {
    let p = a.rows;
    let mut pre = bmat.matmul(x);
    for i in 0..p {
        let s = SQRT_2 / psi.data[i];
        for j in 0..pre.cols {
            let v = pre.get(i, j) * s + bias.data[i];
            pre.set(i, j, activation.apply(v));
        }
    }
    // sqrt(2) A^T Psi h
    let mut scaled = pre;
    for i in 0..p {
        let s = SQRT_2 * psi.data[i];
        for j in 0..scaled.cols {
            let v = scaled.get(i, j) * s;
            scaled.set(i, j, v);
        }
    }
    a.transpose().matmul(&scaled)
}

// ---------------------------------------------------------------------------
// weight derivations, graph-recorded
// ---------------------------------------------------------------------------

/// SN derivation on the tape. The singular pair (u, v) is computed to
/// convergence outside the graph and inserted as constants; at the optimum
/// d sigma_max / dA = u v^T, so rho = u^T A v reproduces both the value and
/// the gradient of the spectral norm.
pub fn sn_weight_graph(g: &mut Graph, a: NodeId, start: Option<&Tensor>) -> Result<(NodeId, Tensor)> {
    let av = g.value(a).clone();
    let (_, v) = match tensor::power_iteration(&av, start, SN_TOL, SN_MAX_ITER) {
        Ok(r) => r,
        Err(LinalgError::ZeroMatrix) => return Err(LayerError::DegenerateWeight),
        Err(e) => return Err(e.into()),
    };
    let av_v = av.matmul(&v);
    let u = av_v.scale(1.0 / av_v.l2_norm());
    let u_c = g.constant(u);
    let v_c = g.constant(v.clone());
    let ut = g.transpose(u_c)?;
    let ua = g.matmul(ut, a)?;
    let rho = g.matmul(ua, v_c)?;
    let one = g.constant(Tensor::scalar(1.0));
    let inv = g.div(one, rho)?;
    let w = g.scale_by_node(a, inv)?;
    Ok((w, v))
}

pub fn aol_weight_graph(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let n = g.value(a).cols;
    let at = g.transpose(a)?;
    let t = g.matmul(at, a)?;
    let t_abs = g.abs(t)?;
    let ones = g.constant(Tensor::from_fn(n, 1, |_, _| 1.0));
    let sums = g.matmul(t_abs, ones)?;
    let roots = g.sqrt(sums)?;
    let d = g.div(ones, roots)?;
    let dm = g.diag_from_vec(d)?;
    Ok(g.matmul(a, dm)?)
}

pub fn cayley_weight_graph(g: &mut Graph, p: NodeId, out_dim: usize, in_dim: usize) -> Result<NodeId> {
    let n = out_dim.max(in_dim);
    let pt = g.transpose(p)?;
    let a = g.sub(p, pt)?;
    let i = g.constant(Tensor::eye(n));
    let ipa = g.add(i, a)?;
    let ima = g.sub(i, a)?;
    let w0 = g.solve(ipa, ima)?;
    let wr = g.slice_rows(w0, 0, out_dim)?;
    Ok(g.slice_cols(wr, 0, in_dim)?)
}

pub fn semi_orthogonal_graph(g: &mut Graph, f: NodeId) -> Result<NodeId> {
    let (p, n) = g.value(f).shape();
    let ft = g.transpose(f)?;
    let w1 = g.slice_rows(ft, 0, p)?;
    let w2 = g.slice_rows(ft, p, n - p)?;
    let w1t = g.transpose(w1)?;
    let skew = g.sub(w1, w1t)?;
    let w2t = g.transpose(w2)?;
    let gram = g.matmul(w2t, w2)?;
    let z = g.add(skew, gram)?;
    let i = g.constant(Tensor::eye(p));
    let ipz = g.add(i, z)?;
    let imz = g.sub(i, z)?;
    let inv = g.solve(ipz, i)?;
    let top = g.matmul(imz, inv)?;
    let bottom_raw = g.matmul(w2, inv)?;
    let bottom = g.scale(bottom_raw, -2.0)?;
    let qtall = g.concat_rows(top, bottom)?;
    Ok(g.transpose(qtall)?)
}

pub fn sandwich_forward_graph(
    g: &mut Graph,
    f: NodeId,
    d: NodeId,
    bias: NodeId,
    activation: Activation,
    x: NodeId,
) -> Result<NodeId> {
    let p = g.value(f).rows;
    let q = semi_orthogonal_graph(g, f)?;
    let a = g.slice_cols(q, 0, p)?;
    let bmat = g.slice_cols(q, p, g.value(q).cols - p)?;
    let psi = g.exp(d)?;
    let ones = g.constant(Tensor::from_fn(p, 1, |_, _| 1.0));
    let psi_inv = g.div(ones, psi)?;
    let dinv = g.diag_from_vec(psi_inv)?;
    let bx = g.matmul(bmat, x)?;
    let scaled_in = g.matmul(dinv, bx)?;
    let pre_unb = g.scale(scaled_in, SQRT_2)?;
    let pre = g.add_col_vec(pre_unb, bias)?;
    let h = activation.apply_graph(g, pre)?;
    let dpsi = g.diag_from_vec(psi)?;
    let ph = g.matmul(dpsi, h)?;
    let at = g.transpose(a)?;
    let out = g.matmul(at, ph)?;
    Ok(g.scale(out, SQRT_2)?)
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

/// An ordered layer stack with optional Lipschitz budget gamma. For
/// constrained architectures the certified upper bound equals gamma by
/// construction; gamma enters as a sqrt(gamma) scaling of the input and the
/// output around a 1-Lipschitz stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyNetwork {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub gamma: Option<f64>,
    pub activation: Activation,
    pub layers: Vec<LayerParams>,
}

/// Per-layer derived (constrained) weights ready for fast evaluation.
#[derive(Debug, Clone)]
pub enum DerivedLayer {
    Linear { w: Tensor, b: Tensor },
    Sandwich { a: Tensor, bmat: Tensor, psi: Tensor, b: Tensor },
}

#[derive(Debug, Clone)]
pub struct DerivedNet {
    pub gamma: Option<f64>,
    pub activation: Activation,
    pub layers: Vec<DerivedLayer>,
}

impl DerivedNet {
    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            DerivedLayer::Linear { w, .. } => w.cols,
            DerivedLayer::Sandwich { bmat, .. } => bmat.cols,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last().unwrap() {
            DerivedLayer::Linear { w, .. } => w.rows,
            DerivedLayer::Sandwich { a, .. } => a.cols,
        }
    }

    /// Evaluates the network on a batch of column vectors (in_dim x B).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let scale = self.gamma.map(|g| g.sqrt()).unwrap_or(1.0);
        let mut h = if scale == 1.0 { x.clone() } else { x.scale(scale) };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = match layer {
                DerivedLayer::Linear { w, b } => {
                    let mut y = w.matmul(&h);
                    for i in 0..y.rows {
                        for j in 0..y.cols {
                            let v = y.get(i, j) + b.data[i];
                            y.set(i, j, v);
                        }
                    }
                    if k < last {
                        y = y.map(|v| self.activation.apply(v));
                    }
                    y
                }
                DerivedLayer::Sandwich { a, bmat, psi, b } => {
                    sandwich_forward(a, bmat, psi, b, self.activation, &h)
                }
            };
        }
        if scale == 1.0 {
            h
        } else {
            h.scale(scale)
        }
    }

    /// Records the forward pass on a tape with the derived weights as
    /// constants; used when only input-side gradients are needed (attacks,
    /// Lipschitz estimation).
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let scale = self.gamma.map(|v| v.sqrt()).unwrap_or(1.0);
        let mut h = if scale == 1.0 { x } else { g.scale(x, scale)? };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = match layer {
                DerivedLayer::Linear { w, b } => {
                    let wn = g.constant(w.clone());
                    let bn = g.constant(b.clone());
                    let wx = g.matmul(wn, h)?;
                    let y = g.add_col_vec(wx, bn)?;
                    if k < last {
                        self.activation.apply_graph(g, y)?
                    } else {
                        y
                    }
                }
                DerivedLayer::Sandwich { a, bmat, psi, b } => {
                    let p = a.rows;
                    let u = g.constant(a.transpose().matmul(&psi.diag_from_vec()).scale(SQRT_2));
                    let vmat = Tensor::from_fn(p, bmat.cols, |i, j| {
                        SQRT_2 / psi.data[i] * bmat.get(i, j)
                    });
                    let v = g.constant(vmat);
                    let bn = g.constant(b.clone());
                    let vx = g.matmul(v, h)?;
                    let pre = g.add_col_vec(vx, bn)?;
                    let act = self.activation.apply_graph(g, pre)?;
                    g.matmul(u, act)?
                }
            };
        }
        Ok(if scale == 1.0 { h } else { g.scale(h, scale)? })
    }

    /// Inserts the derived weights as constants once, for tapes that apply
    /// the same frozen network many times (closed-loop rollouts).
    pub fn stage(&self, g: &mut Graph) -> StagedNet {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                DerivedLayer::Linear { w, b } => StagedLayer::Linear {
                    w: g.constant(w.clone()),
                    b: g.constant(b.clone()),
                },
                DerivedLayer::Sandwich { a, bmat, psi, b } => {
                    let p = a.rows;
                    let u = g.constant(a.transpose().matmul(&psi.diag_from_vec()).scale(SQRT_2));
                    let vmat = Tensor::from_fn(p, bmat.cols, |i, j| {
                        SQRT_2 / psi.data[i] * bmat.get(i, j)
                    });
                    StagedLayer::Sandwich {
                        u,
                        v: g.constant(vmat),
                        b: g.constant(b.clone()),
                    }
                }
            })
            .collect();
        StagedNet {
            layers,
            gamma: self.gamma,
            activation: self.activation,
        }
    }
}

/// A frozen network staged onto a tape as constants; `forward` only appends
/// the per-application nodes.
pub struct StagedNet {
    layers: Vec<StagedLayer>,
    gamma: Option<f64>,
    activation: Activation,
}

enum StagedLayer {
    Linear { w: NodeId, b: NodeId },
    Sandwich { u: NodeId, v: NodeId, b: NodeId },
}

impl StagedNet {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let scale = self.gamma.map(|v| v.sqrt()).unwrap_or(1.0);
        let mut h = if scale == 1.0 { x } else { g.scale(x, scale)? };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = match layer {
                StagedLayer::Linear { w, b } => {
                    let wx = g.matmul(*w, h)?;
                    let y = g.add_col_vec(wx, *b)?;
                    if k < last {
                        self.activation.apply_graph(g, y)?
                    } else {
                        y
                    }
                }
                StagedLayer::Sandwich { u, v, b } => {
                    let vx = g.matmul(*v, h)?;
                    let pre = g.add_col_vec(vx, *b)?;
                    let act = self.activation.apply_graph(g, pre)?;
                    g.matmul(*u, act)?
                }
            };
        }
        Ok(if scale == 1.0 { h } else { g.scale(h, scale)? })
    }
}

/// Free-parameter leaves plus the derived forward recorded on a training tape.
pub struct GraphNet {
    /// leaf node per free tensor, in a fixed order matching `flat_params`
    pub param_nodes: Vec<NodeId>,
    /// derived weight pipeline, ready to apply to an observation node
    layers: Vec<GraphLayer>,
    gamma: Option<f64>,
    activation: Activation,
    last: usize,
}

enum GraphLayer {
    Linear { w: NodeId, b: NodeId },
    Sandwich { f: NodeId, d: NodeId, b: NodeId },
}

impl GraphNet {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let scale = self.gamma.map(|v| v.sqrt()).unwrap_or(1.0);
        let mut h = if scale == 1.0 { x } else { g.scale(x, scale)? };
        for (k, layer) in self.layers.iter().enumerate() {
            h = match layer {
                GraphLayer::Linear { w, b } => {
                    let wx = g.matmul(*w, h)?;
                    let y = g.add_col_vec(wx, *b)?;
                    if k < self.last {
                        self.activation.apply_graph(g, y)?
                    } else {
                        y
                    }
                }
                GraphLayer::Sandwich { f, d, b } => {
                    sandwich_forward_graph(g, *f, *d, *b, self.activation, h)?
                }
            };
        }
        Ok(if scale == 1.0 { h } else { g.scale(h, scale)? })
    }
}

impl PolicyNetwork {
    /// Builds an initialized network. `widths` is the full dimension chain
    /// [input, hidden..., output]. Constrained architectures require a
    /// positive gamma; the plain architecture rejects one.
    pub fn build(
        architecture: Architecture,
        widths: &[usize],
        gamma: Option<f64>,
        seed: u64,
    ) -> Result<PolicyNetwork> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(LayerError::BadWidths(format!("{widths:?}")));
        }
        match (architecture, gamma) {
            (Architecture::Plain, Some(_)) => return Err(LayerError::GammaForPlain),
            (a, None) if a.is_constrained() => return Err(LayerError::MissingGamma),
            (_, Some(g)) if g <= 0.0 => return Err(LayerError::NonPositiveGamma(g)),
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(rows, cols);
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            t
        };
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (q, p) = (widths[k], widths[k + 1]);
            let layer = match architecture {
                Architecture::Plain | Architecture::Sn | Architecture::Aol => {
                    LayerParams::Linear(LinearFree {
                        a: uniform(p, q, q),
                        b: Tensor::zeros(p, 1),
                        sn_cache: None,
                    })
                }
                Architecture::Cayley => {
                    let n = p.max(q);
                    LayerParams::Linear(LinearFree {
                        a: uniform(n, n, n),
                        b: Tensor::zeros(p, 1),
                        sn_cache: None,
                    })
                }
                Architecture::Sandwich => {
                    if k < n_layers - 1 {
                        LayerParams::Sandwich(SandwichFree {
                            f: uniform(p, p + q, p + q),
                            d: Tensor::zeros(p, 1),
                            b: Tensor::zeros(p, 1),
                        })
                    } else {
                        // final layer: linear semi-orthogonal
                        LayerParams::OrthLinear(LinearFree {
                            a: uniform(p, q, q),
                            b: Tensor::zeros(p, 1),
                            sn_cache: None,
                        })
                    }
                }
            };
            layers.push(layer);
        }
        Ok(PolicyNetwork {
            architecture,
            widths: widths.to_vec(),
            gamma,
            activation: Activation::Tanh,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::Linear(p) | LayerParams::OrthLinear(p) => p.a.len() + p.b.len(),
                LayerParams::Sandwich(p) => p.f.len() + p.d.len() + p.b.len(),
            })
            .sum()
    }

    fn derive_layer(&self, k: usize, cache: Option<&Tensor>) -> Result<(DerivedLayer, Option<Tensor>)> {
        let (q, p) = (self.widths[k], self.widths[k + 1]);
        match (&self.layers[k], self.architecture) {
            (LayerParams::Linear(lp), Architecture::Plain) => {
                Ok((DerivedLayer::Linear { w: lp.a.clone(), b: lp.b.clone() }, None))
            }
            (LayerParams::Linear(lp), Architecture::Sn) => {
                let start = cache.or(lp.sn_cache.as_ref());
                let (w, v) = make_sn_weight(&lp.a, start, SN_TOL)?;
                Ok((DerivedLayer::Linear { w, b: lp.b.clone() }, Some(v)))
            }
            (LayerParams::Linear(lp), Architecture::Aol) => {
                Ok((DerivedLayer::Linear { w: make_aol_weight(&lp.a), b: lp.b.clone() }, None))
            }
            (LayerParams::Linear(lp), Architecture::Cayley) => {
                let w = make_cayley_weight(&lp.a, p, q)?;
                Ok((DerivedLayer::Linear { w, b: lp.b.clone() }, None))
            }
            (LayerParams::Sandwich(sp), _) => {
                let qmat = make_semi_orthogonal(&sp.f)?;
                let a = qmat.slice_cols(0, p);
                let bmat = qmat.slice_cols(p, q);
                let psi = sp.d.map(f64::exp);
                Ok((DerivedLayer::Sandwich { a, bmat, psi, b: sp.b.clone() }, None))
            }
            (LayerParams::OrthLinear(lp), _) => {
                let w = if p <= q {
                    make_semi_orthogonal(&lp.a)?
                } else {
                    // tall case: orthonormal columns, still 1-Lipschitz
                    make_semi_orthogonal(&lp.a.transpose())?.transpose()
                };
                Ok((DerivedLayer::Linear { w, b: lp.b.clone() }, None))
            }
            (LayerParams::Linear(_), Architecture::Sandwich) => {
                Err(LayerError::BadWidths("linear layer inside a sandwich stack".into()))
            }
        }
    }

    /// Derives all constrained weights for fast evaluation.
    pub fn derive(&self) -> Result<DerivedNet> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            layers.push(self.derive_layer(k, None)?.0);
        }
        Ok(DerivedNet { gamma: self.gamma, activation: self.activation, layers })
    }

    /// Like [`PolicyNetwork::derive`], also refreshing the SN warm-start
    /// caches in place. Used by the trainer between optimizer steps.
    pub fn derive_and_cache(&mut self) -> Result<DerivedNet> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let (dl, v) = self.derive_layer(k, None)?;
            if let (Some(v), LayerParams::Linear(lp)) = (v, &mut self.layers[k]) {
                lp.sn_cache = Some(v);
            }
            layers.push(dl);
        }
        Ok(DerivedNet { gamma: self.gamma, activation: self.activation, layers })
    }

    /// Inserts the free parameters as leaves on a training tape and records
    /// the weight derivations. The returned [`GraphNet`] exposes the leaf ids
    /// in the same order as [`PolicyNetwork::flat_params`].
    pub fn graph_net(&self, g: &mut Graph) -> Result<GraphNet> {
        let mut param_nodes = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let (q, p) = (self.widths[k], self.widths[k + 1]);
            match &self.layers[k] {
                LayerParams::Linear(lp) => {
                    let a = g.leaf(lp.a.clone());
                    let b = g.leaf(lp.b.clone());
                    param_nodes.push(a);
                    param_nodes.push(b);
                    let w = match self.architecture {
                        Architecture::Plain => a,
                        Architecture::Sn => sn_weight_graph(g, a, lp.sn_cache.as_ref())?.0,
                        Architecture::Aol => aol_weight_graph(g, a)?,
                        Architecture::Cayley => cayley_weight_graph(g, a, p, q)?,
                        Architecture::Sandwich => {
                            return Err(LayerError::BadWidths(
                                "linear layer inside a sandwich stack".into(),
                            ))
                        }
                    };
                    layers.push(GraphLayer::Linear { w, b });
                }
                LayerParams::Sandwich(sp) => {
                    let f = g.leaf(sp.f.clone());
                    let d = g.leaf(sp.d.clone());
                    let b = g.leaf(sp.b.clone());
                    param_nodes.push(f);
                    param_nodes.push(d);
                    param_nodes.push(b);
                    layers.push(GraphLayer::Sandwich { f, d, b });
                }
                LayerParams::OrthLinear(lp) => {
                    let a = g.leaf(lp.a.clone());
                    let b = g.leaf(lp.b.clone());
                    param_nodes.push(a);
                    param_nodes.push(b);
                    let w = if p <= q {
                        semi_orthogonal_graph(g, a)?
                    } else {
                        let at = g.transpose(a)?;
                        let wt = semi_orthogonal_graph(g, at)?;
                        g.transpose(wt)?
                    };
                    layers.push(GraphLayer::Linear { w, b });
                }
            }
        }
        Ok(GraphNet {
            param_nodes,
            layers,
            gamma: self.gamma,
            activation: self.activation,
            last: self.layers.len() - 1,
        })
    }

    /// Views of all free parameter tensors in a fixed order.
    pub fn flat_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Linear(p) | LayerParams::OrthLinear(p) => {
                    out.push(&p.a);
                    out.push(&p.b);
                }
                LayerParams::Sandwich(p) => {
                    out.push(&p.f);
                    out.push(&p.d);
                    out.push(&p.b);
                }
            }
        }
        out
    }

    /// Mutable views matching [`PolicyNetwork::flat_params`].
    pub fn flat_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Linear(p) | LayerParams::OrthLinear(p) => {
                    out.push(&mut p.a);
                    out.push(&mut p.b);
                }
                LayerParams::Sandwich(p) => {
                    out.push(&mut p.f);
                    out.push(&mut p.d);
                    out.push(&mut p.b);
                }
            }
        }
        out
    }

    /// Certified Lipschitz upper bound: the stored gamma for constrained
    /// architectures (exact by construction), the product of layer spectral
    /// norms for the plain architecture.
    pub fn certified_upper_bound(&self) -> Result<f64> {
        match self.gamma {
            Some(g) => Ok(g),
            None => {
                let mut product = 1.0;
                for l in &self.layers {
                    if let LayerParams::Linear(lp) = l {
                        let (sigma, _) = tensor::power_iteration(&lp.a, None, 1e-9, 1000)
                            .map_err(LayerError::from)?;
                        product *= sigma;
                    }
                }
                Ok(product)
            }
        }
    }
}

/// Builds an initialized policy network (see [`PolicyNetwork::build`]).
pub fn build_policy(
    architecture: Architecture,
    widths: &[usize],
    gamma: Option<f64>,
    seed: u64,
) -> Result<PolicyNetwork> {
    PolicyNetwork::build(architecture, widths, gamma, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sn_scaled_identity() {
        let a = Tensor::eye(2).scale(2.0);
        let (w, _) = make_sn_weight(&a, None, 1e-9).unwrap();
        assert!(w.sub(&Tensor::eye(2)).max_abs() < 1e-9);
    }

    #[test]
    fn sn_diagonal() {
        let a = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let (w, _) = make_sn_weight(&a, None, 1e-12).unwrap();
        assert!((w.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((w.get(1, 1) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn sn_random_sigma_one_vs_svd() {
        let a = random_tensor(8, 6, 3);
        let (w, _) = make_sn_weight(&a, None, 1e-9).unwrap();
        assert!((reference::sigma_max(&w) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sn_zero_matrix_degenerate() {
        assert!(matches!(
            make_sn_weight(&Tensor::zeros(3, 3), None, 1e-9),
            Err(LayerError::DegenerateWeight)
        ));
    }

    #[test]
    fn aol_identity() {
        let w = make_aol_weight(&Tensor::eye(3));
        assert!(w.sub(&Tensor::eye(3)).max_abs() < 1e-15);
    }

    #[test]
    fn aol_rank_one_example() {
        let a = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let w = make_aol_weight(&a);
        for v in &w.data {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!((reference::sigma_max(&w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aol_random_contractive() {
        let a = random_tensor(10, 10, 7);
        let w = make_aol_weight(&a);
        assert!(reference::sigma_max(&w) <= 1.0 + 1e-9);
    }

    #[test]
    fn aol_zero_column_zeroed() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let w = make_aol_weight(&a);
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.get(1, 1), 0.0);
        assert!(reference::sigma_max(&w) <= 1.0 + 1e-12);
    }

    #[test]
    fn cayley_zero_gives_identity() {
        let w = make_cayley_weight(&Tensor::zeros(3, 3), 3, 3).unwrap();
        assert!(w.sub(&Tensor::eye(3)).max_abs() < 1e-14);
    }

    #[test]
    fn cayley_rotation_example() {
        // P chosen so A = P - P^T = [[0,1],[-1,0]]
        let p = Tensor::from_rows(&[&[0.0, 0.5], &[-0.5, 0.0]]);
        let w = make_cayley_weight(&p, 2, 2).unwrap();
        let expect = Tensor::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(w.sub(&expect).max_abs() < 1e-14);
    }

    #[test]
    fn cayley_random_orthogonal() {
        let p = random_tensor(12, 12, 11);
        let w = make_cayley_weight(&p, 12, 12).unwrap();
        let r = w.transpose().matmul(&w).sub(&Tensor::eye(12));
        assert!(r.frobenius_norm() < 1e-10);
    }

    #[test]
    fn cayley_rectangular_row_orthonormal() {
        let p = random_tensor(8, 8, 13);
        let w = make_cayley_weight(&p, 5, 8).unwrap();
        let r = w.matmul(&w.transpose()).sub(&Tensor::eye(5));
        assert!(r.frobenius_norm() < 1e-10);
    }

    #[test]
    fn semi_orthogonal_residual() {
        let f = random_tensor(5, 12, 17);
        let q = make_semi_orthogonal(&f).unwrap();
        let r = q.matmul(&q.transpose()).sub(&Tensor::eye(5));
        assert!(r.frobenius_norm() < 1e-10);
    }

    #[test]
    fn sandwich_zero_input_zero_bias() {
        let f = random_tensor(4, 7, 19);
        let q = make_semi_orthogonal(&f).unwrap();
        let a = q.slice_cols(0, 4);
        let bmat = q.slice_cols(4, 3);
        let psi = Tensor::from_fn(4, 1, |_, _| 1.3);
        let bias = Tensor::zeros(4, 1);
        let x = Tensor::zeros(3, 1);
        for act in [Activation::Tanh, Activation::Relu] {
            let y = sandwich_forward(&a, &bmat, &psi, &bias, act, &x);
            assert!(y.max_abs() < 1e-15);
        }
    }

    #[test]
    fn sandwich_scalar_case() {
        let s = 1.0 / SQRT_2;
        let a = Tensor::scalar(s);
        let bmat = Tensor::scalar(s);
        let psi = Tensor::scalar(1.0);
        let bias = Tensor::zeros(1, 1);
        let y = sandwich_forward(&a, &bmat, &psi, &bias, Activation::Relu, &Tensor::scalar(1.0));
        assert!((y.as_scalar() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn build_rejects_bad_gamma() {
        assert!(matches!(
            build_policy(Architecture::Plain, &[2, 8, 1], Some(4.0), 0),
            Err(LayerError::GammaForPlain)
        ));
        assert!(matches!(
            build_policy(Architecture::Sandwich, &[2, 8, 1], None, 0),
            Err(LayerError::MissingGamma)
        ));
        assert!(matches!(
            build_policy(Architecture::Sn, &[2, 8, 1], Some(-1.0), 0),
            Err(LayerError::NonPositiveGamma(_))
        ));
    }

    #[test]
    fn certified_bound_is_gamma_for_constrained() {
        for arch in [Architecture::Sn, Architecture::Aol, Architecture::Cayley, Architecture::Sandwich] {
            let net = build_policy(arch, &[2, 8, 8, 1], Some(10.0), 1).unwrap();
            assert_eq!(net.certified_upper_bound().unwrap(), 10.0);
        }
    }

    #[test]
    fn certified_bound_plain_product_of_norms() {
        let mut net = build_policy(Architecture::Plain, &[2, 2, 2], None, 2).unwrap();
        if let LayerParams::Linear(lp) = &mut net.layers[0] {
            lp.a = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        }
        if let LayerParams::Linear(lp) = &mut net.layers[1] {
            lp.a = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 0.5]]);
        }
        let bound = net.certified_upper_bound().unwrap();
        assert!((bound - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sandwich_param_count_near_plain() {
        let plain = build_policy(Architecture::Plain, &[2, 32, 32, 32, 1], None, 0).unwrap();
        let sandwich = build_policy(Architecture::Sandwich, &[2, 21, 21, 21, 1], Some(4.0), 0).unwrap();
        let (np, ns) = (plain.param_count() as f64, sandwich.param_count() as f64);
        assert!((ns - np).abs() / np < 0.10, "plain {np} vs sandwich {ns}");
    }

    #[test]
    fn gamma_scaling_identity_single_linear_layer() {
        // a single-linear-layer constrained net evaluates to gamma * (1-Lipschitz stack at x)
        let gamma = 9.0;
        let net = build_policy(Architecture::Cayley, &[2, 2], Some(gamma), 5).unwrap();
        let mut unit = net.clone();
        unit.gamma = Some(1.0);
        let x = Tensor::col(&[0.3, -0.7]);
        let y_g = net.derive().unwrap().forward(&x);
        let y_1 = unit.derive().unwrap().forward(&x);
        assert!(y_g.sub(&y_1.scale(gamma)).max_abs() < 1e-12);
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        for (arch, gamma) in [
            (Architecture::Plain, None),
            (Architecture::Sn, Some(4.0)),
            (Architecture::Aol, Some(4.0)),
            (Architecture::Cayley, Some(4.0)),
            (Architecture::Sandwich, Some(4.0)),
        ] {
            let net = build_policy(arch, &[2, 6, 6, 1], gamma, 42).unwrap();
            // give the network nonzero biases so the comparison is not trivial
            let mut net = net;
            for p in net.flat_params_mut() {
                if p.cols == 1 {
                    for (i, v) in p.data.iter_mut().enumerate() {
                        *v += 0.01 * (i as f64 + 1.0);
                    }
                }
            }
            let x = Tensor::from_rows(&[&[0.4, -1.2], &[-0.9, 0.2]]);
            let fast = net.derive().unwrap().forward(&x);
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let gn = net.graph_net(&mut g).unwrap();
            let out = gn.forward(&mut g, xn).unwrap();
            let via_graph = g.value(out);
            assert!(
                fast.sub(via_graph).max_abs() < 1e-10,
                "{arch}: fast vs graph forward mismatch"
            );
            let mut g2 = Graph::new();
            let xn2 = g2.constant(x.clone());
            let derived = net.derive().unwrap();
            let out2 = derived.forward_graph(&mut g2, xn2).unwrap();
            assert!(fast.sub(g2.value(out2)).max_abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip_recomputes_derived_weights() {
        let net = build_policy(Architecture::Sandwich, &[2, 5, 5, 1], Some(4.0), 9).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: PolicyNetwork = serde_json::from_str(&json).unwrap();
        let x = Tensor::col(&[0.5, -0.5]);
        let y0 = net.derive().unwrap().forward(&x);
        let y1 = back.derive().unwrap().forward(&x);
        assert!(y0.sub(&y1).max_abs() < 1e-15);
    }
}
