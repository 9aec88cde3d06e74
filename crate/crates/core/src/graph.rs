//! Tape-based reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] is an append-only list of primitive operations. Forward values
//! are computed eagerly when a node is inserted, so `evaluate` is just a value
//! lookup and `backward` can run immediately. Every node's value is checked
//! for non-finite entries at insertion; the offending node id is reported.
//!
//! A graph is single-threaded; evaluate several graphs in parallel instead of
//! sharing one.

use crate::tensor::{self, LinalgError, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by node {node}")]
    NonFinite { node: usize },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: (usize, usize),
        output: (usize, usize),
    },
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

// some recorded operands (constants, slice lengths) are not needed by the
// backward pass but keep the tape self-describing
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    /// column vector broadcast-added to every column
    AddColVec(NodeId, NodeId),
    /// multiply by a 1x1 node
    ScaleByNode(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Clip(NodeId, f64, f64),
    Transpose(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    WrapAngle(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    DiagFromVec(NodeId),
    /// x = a^{-1} b for square a
    Solve(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints for every node of a graph after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape if the node was not
    /// reached by the backward pass.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        self.adj[id.0].clone().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node: id.0 });
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// Inserts a tensor as a leaf. Leaves are both inputs and trainable
    /// parameters; gradients are available for any node after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value: t });
        id
    }

    /// Alias for [`Graph::leaf`]; reads better when the tensor is not a
    /// differentiation target.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GraphError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.0 {
            return Err(GraphError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).mul_elem(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("min", a, b)?;
        let v = self.value(a).zip(self.value(b), f64::min);
        self.push(Op::MinElem(a, b), v)
    }

    /// Adds column vector `b` (m x 1) to every column of `a` (m x n).
    pub fn add_col_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.1 != 1 || sa.0 != sb.0 {
            return Err(GraphError::ShapeMismatch { op: "add_col_vec", lhs: sa, rhs: sb });
        }
        let bv = self.value(b).clone();
        let v = Tensor::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) + bv.data[i]);
        self.push(Op::AddColVec(a, b), v)
    }

    /// Multiplies `a` elementwise by the 1x1 node `s`.
    pub fn scale_by_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.value(s).shape();
        if ss != (1, 1) {
            return Err(GraphError::ShapeMismatch {
                op: "scale_by_node",
                lhs: self.value(a).shape(),
                rhs: ss,
            });
        }
        let c = self.value(s).as_scalar();
        let v = self.value(a).scale(c);
        self.push(Op::ScaleByNode(a, s), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a, c), v)
    }

    /// Clamp to [lo, hi]; gradient passes through on the closed interval.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clip(a, lo, hi), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), v)
    }

    /// Wraps every entry to [-pi, pi) (pi maps to -pi). The wrap is a
    /// piecewise-constant shift, so its gradient is 1 almost everywhere.
    pub fn wrap_angle(&mut self, a: NodeId) -> Result<NodeId> {
        use std::f64::consts::PI;
        let v = self.value(a).map(|x| (x + PI).rem_euclid(2.0 * PI) - PI);
        self.push(Op::WrapAngle(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.1 {
            return Err(GraphError::ShapeMismatch { op: "concat_rows", lhs: sa, rhs: sb });
        }
        let v = self.value(a).concat_rows(self.value(b));
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.0 != sb.0 {
            return Err(GraphError::ShapeMismatch { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let v = self.value(a).concat_cols(self.value(b));
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if start + len > sa.0 {
            return Err(GraphError::ShapeMismatch { op: "slice_rows", lhs: sa, rhs: (start, len) });
        }
        let v = self.value(a).slice_rows(start, len);
        self.push(Op::SliceRows(a, start, len), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if start + len > sa.1 {
            return Err(GraphError::ShapeMismatch { op: "slice_cols", lhs: sa, rhs: (start, len) });
        }
        let v = self.value(a).slice_cols(start, len);
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn diag_from_vec(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.1 != 1 {
            return Err(GraphError::ShapeMismatch { op: "diag_from_vec", lhs: sa, rhs: (sa.0, 1) });
        }
        let v = self.value(a).diag_from_vec();
        self.push(Op::DiagFromVec(a), v)
    }

    /// x = a^{-1} b via LU with partial pivoting; the condition guard of the
    /// factorization signals near-singular systems.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.0 != sa.1 || sa.0 != sb.0 {
            return Err(GraphError::ShapeMismatch { op: "solve", lhs: sa, rhs: sb });
        }
        let v = tensor::solve(self.value(a), self.value(b))?;
        self.push(Op::Solve(a, b), v)
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output value). Visits nodes in reverse insertion order exactly once.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(GraphError::SeedShape { seed: seed.shape(), output: out_shape });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !g.is_finite() {
                return Err(GraphError::NonFinite { node: idx });
            }
            self.accumulate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut adj[id.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.value(b).transpose());
                let gb = self.value(a).transpose().matmul(g);
                Self::acc(adj, a, ga);
                Self::acc(adj, b, gb);
            }
            Op::Add(a, b) => {
                Self::acc(adj, a, g.clone());
                Self::acc(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::acc(adj, a, g.clone());
                Self::acc(adj, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                Self::acc(adj, a, g.mul_elem(self.value(b)));
                Self::acc(adj, b, g.mul_elem(self.value(a)));
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                Self::acc(adj, a, g.zip(bv, |gy, y| gy / y));
                let av = self.value(a);
                let gb = Tensor::from_fn(bv.rows, bv.cols, |i, j| {
                    let y = bv.get(i, j);
                    -g.get(i, j) * av.get(i, j) / (y * y)
                });
                Self::acc(adj, b, gb);
            }
            Op::MinElem(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let ga = g.zip(&av.zip(bv, |x, y| if x <= y { 1.0 } else { 0.0 }), |gy, m| gy * m);
                let gb = g.zip(&av.zip(bv, |x, y| if x <= y { 0.0 } else { 1.0 }), |gy, m| gy * m);
                Self::acc(adj, a, ga);
                Self::acc(adj, b, gb);
            }
            Op::AddColVec(a, b) => {
                Self::acc(adj, a, g.clone());
                let mut gb = Tensor::zeros(g.rows, 1);
                for i in 0..g.rows {
                    gb.data[i] = g.row_slice(i).iter().sum();
                }
                Self::acc(adj, b, gb);
            }
            Op::ScaleByNode(a, s) => {
                let c = self.value(s).as_scalar();
                Self::acc(adj, a, g.scale(c));
                let gs = g.mul_elem(self.value(a)).sum();
                Self::acc(adj, s, Tensor::scalar(gs));
            }
            Op::Scale(a, c) => Self::acc(adj, a, g.scale(c)),
            Op::AddConst(a, _) => Self::acc(adj, a, g.clone()),
            Op::Clip(a, lo, hi) => {
                let av = self.value(a);
                let ga = Tensor::from_fn(g.rows, g.cols, |i, j| {
                    let x = av.get(i, j);
                    if (lo..=hi).contains(&x) {
                        g.get(i, j)
                    } else {
                        0.0
                    }
                });
                Self::acc(adj, a, ga);
            }
            Op::Transpose(a) => Self::acc(adj, a, g.transpose()),
            Op::Tanh(a) => {
                let y = &node.value;
                Self::acc(adj, a, g.zip(y, |gy, t| gy * (1.0 - t * t)));
            }
            Op::Relu(a) => {
                // subgradient 0 at the kink
                let av = self.value(a);
                Self::acc(adj, a, g.zip(av, |gy, x| if x > 0.0 { gy } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                Self::acc(adj, a, g.zip(y, |gy, s| gy * s * (1.0 - s)));
            }
            Op::Exp(a) => Self::acc(adj, a, g.mul_elem(&node.value)),
            Op::Log(a) => Self::acc(adj, a, g.zip(self.value(a), |gy, x| gy / x)),
            Op::Abs(a) => {
                let av = self.value(a);
                Self::acc(adj, a, g.zip(av, |gy, x| gy * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::Square(a) => Self::acc(adj, a, g.zip(self.value(a), |gy, x| gy * 2.0 * x)),
            Op::Sqrt(a) => Self::acc(adj, a, g.zip(&node.value, |gy, y| gy * 0.5 / y)),
            Op::Sin(a) => Self::acc(adj, a, g.zip(self.value(a), |gy, x| gy * x.cos())),
            Op::Cos(a) => Self::acc(adj, a, g.zip(self.value(a), |gy, x| -gy * x.sin())),
            Op::WrapAngle(a) => Self::acc(adj, a, g.clone()),
            Op::Sum(a) => {
                let s = g.as_scalar();
                let av = self.value(a);
                Self::acc(adj, a, Tensor::from_fn(av.rows, av.cols, |_, _| s));
            }
            Op::Mean(a) => {
                let av = self.value(a);
                let s = g.as_scalar() / av.len() as f64;
                Self::acc(adj, a, Tensor::from_fn(av.rows, av.cols, |_, _| s));
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(a).rows;
                Self::acc(adj, a, g.slice_rows(0, ra));
                Self::acc(adj, b, g.slice_rows(ra, g.rows - ra));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols;
                Self::acc(adj, a, g.slice_cols(0, ca));
                Self::acc(adj, b, g.slice_cols(ca, g.cols - ca));
            }
            Op::SliceRows(a, start, _) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        ga.set(start + i, j, g.get(i, j));
                    }
                }
                Self::acc(adj, a, ga);
            }
            Op::SliceCols(a, start, _) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                Self::acc(adj, a, ga);
            }
            Op::DiagFromVec(a) => {
                let n = self.value(a).rows;
                let ga = Tensor::from_fn(n, 1, |i, _| g.get(i, i));
                Self::acc(adj, a, ga);
            }
            Op::Solve(a, b) => {
                // x = A^{-1} b: grad_b = A^{-T} xbar, grad_A = -grad_b x^T
                let at = self.value(a).transpose();
                let gb = tensor::solve(&at, g)?;
                let ga = gb.matmul(&node.value.transpose()).scale(-1.0);
                Self::acc(adj, a, ga);
                Self::acc(adj, b, gb);
            }
        }
        Ok(())
    }
}

/// Outcome of comparing reverse-mode gradients against central finite
/// differences, componentwise over every checked leaf.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// max relative error per checked leaf, in input order
    pub per_param: Vec<f64>,
    pub pass: bool,
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Checks the reverse-mode gradient of a scalar-valued function against
/// central finite differences at `point`. `build` records the function on a
/// fresh graph given leaf nodes for each point tensor and returns the scalar
/// output node. Relative errors use an absolute floor of 1e-8 for near-zero
/// components.
pub fn grad_check(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    point: &[Tensor],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).as_scalar())
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    if g.value(out).shape() != (1, 1) {
        return Err(GraphError::SeedShape { seed: (1, 1), output: g.value(out).shape() });
    }
    let grads = g.backward(out, &Tensor::scalar(1.0))?;

    let mut per_param = Vec::with_capacity(point.len());
    let mut max_rel: f64 = 0.0;
    for (pi, t) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaves[pi], t.rows, t.cols);
        let mut worst: f64 = 0.0;
        for k in 0..t.len() {
            let h = FD_STEP * t.data[k].abs().max(1.0);
            let mut plus = point.to_vec();
            plus[pi].data[k] += h;
            let mut minus = point.to_vec();
            minus[pi].data[k] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let denom = fd.abs().max(analytic.data[k].abs()).max(1e-8);
            worst = worst.max((analytic.data[k] - fd).abs() / denom);
        }
        per_param.push(worst);
        max_rel = max_rel.max(worst);
    }
    Ok(GradCheckReport { max_rel_error: max_rel, per_param, pass: max_rel < tolerance })
}
