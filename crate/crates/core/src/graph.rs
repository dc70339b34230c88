//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Define-by-run: each builder call evaluates its primitive eagerly and
//! records the operation, so insertion order is already a topological order.
//! [`Graph::backward`] makes a single reverse sweep, visiting every node
//! exactly once and accumulating adjoints in a fixed order, which keeps
//! repeated runs bit-identical.
//!
//! The graph is rebuilt per training step; for finite-difference checks the
//! cheaper path is [`Graph::set_leaf`] followed by [`Graph::forward`], which
//! re-evaluates the recorded operations in place.

use crate::error::{Dims, Error, Result};
use crate::tensor::Tensor;

/// Norm guard used wherever a division by a vector norm could hit zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    L2Norm(NodeId),
    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    Cosine(NodeId, NodeId),
    /// Mean binary cross-entropy with logits: (logits, targets).
    BceWithLogits(NodeId, NodeId),
    /// Tensor scaled by a 1x1 scalar node.
    ScaleByScalar(NodeId, NodeId),
    /// 1 / max(x, eps) on a 1x1 scalar node.
    RecipClamped(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `id`; zero-shaped nodes the root does not depend
    /// on return `None`.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, densified to zeros when the root does not depend
    /// on it.
    pub fn dense(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable per-element BCE with logits: max(z,0) - z*t + ln(1 + e^-|z|).
fn bce_elem(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id.0].value.dims()
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        Ok(())
    }

    // ── Builders ────────────────────────────────────────────────────────

    /// Input node. Leaves hold values bound at creation (or via
    /// [`Graph::set_leaf`]); gradients are reported for every leaf alike,
    /// whether it is a parameter or a constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("add", a, b)?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("sub", a, b)?;
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("mul", a, b)?;
        let value = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Concatenate along columns; row counts must match.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.dims(a),
                rhs: self.dims(b),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.nodes[a.0].value.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].value.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::from_vec(ra, ca + cb, data)?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    /// Rows `start..end` as a new node.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let data = self.nodes[a.0].value.data()[start * c..end * c].to_vec();
        let value = Tensor::from_vec(end - start, c, data)?;
        Ok(self.push(Op::SliceRows(a, start, end), value))
    }

    /// Columns `start..end` as a new node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&self.nodes[a.0].value.data()[row * c + start..row * c + end]);
        }
        let value = Tensor::from_vec(r, end - start, data)?;
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    /// Sum of all entries (1x1).
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean of all entries (1x1).
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Sum of absolute entries (1x1); subgradient of |x| at 0 is 0.
    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[a.0].value.l1_norm());
        self.push(Op::L1Norm(a), value)
    }

    /// Frobenius norm (1x1).
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[a.0].value.frobenius_norm());
        self.push(Op::L2Norm(a), value)
    }

    /// Cosine similarity of two same-shape tensors as flat vectors, with
    /// [`NORM_EPS`] added to each norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("cosine", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = Tensor::scalar(va.cosine(vb, NORM_EPS)?);
        Ok(self.push(Op::Cosine(a, b), value))
    }

    /// Mean over elements of the stabilized BCE-with-logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.require_same_shape("bce_with_logits", logits, targets)?;
        let z = &self.nodes[logits.0].value;
        let t = &self.nodes[targets.0].value;
        let total: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| bce_elem(z, t))
            .sum();
        let value = Tensor::scalar(total / z.len() as f64);
        Ok(self.push(Op::BceWithLogits(logits, targets), value))
    }

    /// `a` scaled by the value of a 1x1 scalar node.
    pub fn scale_by(&mut self, a: NodeId, scalar: NodeId) -> Result<NodeId> {
        if self.shape(scalar) != (1, 1) {
            return Err(Error::NotScalar {
                op: "scale_by",
                shape: self.dims(scalar),
            });
        }
        let s = self.nodes[scalar.0].value.data()[0];
        let value = self.nodes[a.0].value.scale(s);
        Ok(self.push(Op::ScaleByScalar(a, scalar), value))
    }

    /// 1 / max(x, eps) of a 1x1 scalar node. The gradient is 0 in the
    /// clamped region.
    pub fn recip_clamped(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if self.shape(a) != (1, 1) {
            return Err(Error::NotScalar {
                op: "recip_clamped",
                shape: self.dims(a),
            });
        }
        let x = self.nodes[a.0].value.data()[0];
        let value = Tensor::scalar(1.0 / x.max(eps));
        Ok(self.push(Op::RecipClamped(a, eps), value))
    }

    // ── Forward / backward ──────────────────────────────────────────────

    /// Rebind a leaf's value; the shape must match the original binding.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match self.nodes[id.0].op {
            Op::Leaf => {}
            _ => return Err(Error::invalid("set_leaf", "node is not a leaf")),
        }
        if value.shape() != self.shape(id) {
            return Err(Error::ShapeMismatch {
                op: "set_leaf",
                lhs: self.dims(id),
                rhs: value.dims(),
            });
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    /// Overwrite one entry of a leaf (finite-difference probing).
    pub fn nudge_leaf(&mut self, id: NodeId, index: usize, value: f64) -> Result<()> {
        match self.nodes[id.0].op {
            Op::Leaf => {}
            _ => return Err(Error::invalid("nudge_leaf", "node is not a leaf")),
        }
        self.nodes[id.0].value.data_mut()[index] = value;
        Ok(())
    }

    /// Re-evaluate every recorded operation against the current leaf values
    /// and return the value at `root`.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::Matmul(a, b) => v(a).matmul(v(b))?,
            Op::Transpose(a) => v(a).transpose(),
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Mul(a, b) => v(a).mul_elem(v(b))?,
            Op::Scale(a, f) => v(a).scale(*f),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::ConcatCols(a, b) => {
                let (ra, ca) = v(a).shape();
                let cb = v(b).cols();
                let mut data = Vec::with_capacity(ra * (ca + cb));
                for r in 0..ra {
                    data.extend_from_slice(&v(a).data()[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&v(b).data()[r * cb..(r + 1) * cb]);
                }
                Tensor::from_vec(ra, ca + cb, data)?
            }
            Op::SliceRows(a, s, e) => {
                let c = v(a).cols();
                Tensor::from_vec(e - s, c, v(a).data()[s * c..e * c].to_vec())?
            }
            Op::SliceCols(a, s, e) => {
                let (r, c) = v(a).shape();
                let mut data = Vec::with_capacity(r * (e - s));
                for row in 0..r {
                    data.extend_from_slice(&v(a).data()[row * c + s..row * c + e]);
                }
                Tensor::from_vec(r, e - s, data)?
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => Tensor::scalar(v(a).sum() / v(a).len() as f64),
            Op::L1Norm(a) => Tensor::scalar(v(a).l1_norm()),
            Op::L2Norm(a) => Tensor::scalar(v(a).frobenius_norm()),
            Op::Cosine(a, b) => Tensor::scalar(v(a).cosine(v(b), NORM_EPS)?),
            Op::BceWithLogits(z, t) => {
                let total: f64 = v(z)
                    .data()
                    .iter()
                    .zip(v(t).data())
                    .map(|(&z, &t)| bce_elem(z, t))
                    .sum();
                Tensor::scalar(total / v(z).len() as f64)
            }
            Op::ScaleByScalar(a, s) => v(a).scale(v(s).data()[0]),
            Op::RecipClamped(a, eps) => Tensor::scalar(1.0 / v(a).data()[0].max(*eps)),
        })
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.dims(root),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(&self.nodes[i].op, &grad, &mut grads)?;
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn adjoint(&self, op: &Op, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = grad.matmul(&v(b).transpose())?;
                let db = v(a).transpose().matmul(grad)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, grad.transpose())?;
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, grad.clone())?;
                Self::accumulate(grads, *b, grad.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, grad.clone())?;
                Self::accumulate(grads, *b, grad.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, grad.mul_elem(v(b))?)?;
                Self::accumulate(grads, *b, grad.mul_elem(v(a))?)?;
            }
            Op::Scale(a, f) => {
                Self::accumulate(grads, *a, grad.scale(*f))?;
            }
            Op::Relu(a) => {
                let mask = v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(grads, *a, grad.mul_elem(&mask)?)?;
            }
            Op::Sigmoid(a) => {
                let dydx = v(a).map(|x| {
                    let y = sigmoid(x);
                    y * (1.0 - y)
                });
                Self::accumulate(grads, *a, grad.mul_elem(&dydx)?)?;
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = v(a).shape();
                let cb = v(b).cols();
                let mut da = Tensor::zeros(r, ca);
                let mut db = Tensor::zeros(r, cb);
                for row in 0..r {
                    for c in 0..ca {
                        da.set(row, c, grad.get(row, c));
                    }
                    for c in 0..cb {
                        db.set(row, c, grad.get(row, ca + c));
                    }
                }
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::SliceRows(a, s, _e) => {
                let (r, c) = v(a).shape();
                let mut da = Tensor::zeros(r, c);
                for row in 0..grad.rows() {
                    for col in 0..c {
                        da.set(s + row, col, grad.get(row, col));
                    }
                }
                Self::accumulate(grads, *a, da)?;
            }
            Op::SliceCols(a, s, _e) => {
                let (r, c) = v(a).shape();
                let mut da = Tensor::zeros(r, c);
                for row in 0..r {
                    for col in 0..grad.cols() {
                        da.set(row, s + col, grad.get(row, col));
                    }
                }
                Self::accumulate(grads, *a, da)?;
            }
            Op::Sum(a) => {
                let g = grad.data()[0];
                let (r, c) = v(a).shape();
                Self::accumulate(grads, *a, Tensor::filled(r, c, g))?;
            }
            Op::Mean(a) => {
                let g = grad.data()[0] / v(a).len() as f64;
                let (r, c) = v(a).shape();
                Self::accumulate(grads, *a, Tensor::filled(r, c, g))?;
            }
            Op::L1Norm(a) => {
                let g = grad.data()[0];
                let da = v(a).map(|x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                Self::accumulate(grads, *a, da)?;
            }
            Op::L2Norm(a) => {
                let g = grad.data()[0];
                let norm = v(a).frobenius_norm().max(NORM_EPS);
                Self::accumulate(grads, *a, v(a).scale(g / norm))?;
            }
            Op::Cosine(a, b) => {
                let g = grad.data()[0];
                let (da, db) = cosine_adjoint(v(a), v(b), g)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::BceWithLogits(z, t) => {
                let g = grad.data()[0] / v(z).len() as f64;
                let dz = v(z)
                    .data()
                    .iter()
                    .zip(v(t).data())
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                let dt = v(z).data().iter().map(|&z| -g * z).collect();
                let (r, c) = v(z).shape();
                Self::accumulate(grads, *z, Tensor::from_vec(r, c, dz)?)?;
                Self::accumulate(grads, *t, Tensor::from_vec(r, c, dt)?)?;
            }
            Op::ScaleByScalar(a, s) => {
                let sval = v(s).data()[0];
                Self::accumulate(grads, *a, grad.scale(sval))?;
                let ds = grad.dot(v(a))?;
                Self::accumulate(grads, *s, Tensor::scalar(ds))?;
            }
            Op::RecipClamped(a, eps) => {
                let x = v(a).data()[0];
                let da = if x > *eps {
                    -grad.data()[0] / (x * x)
                } else {
                    0.0
                };
                Self::accumulate(grads, *a, Tensor::scalar(da))?;
            }
        }
        Ok(())
    }

    /// Smallest distance to a subgradient kink (ReLU or L1 input magnitude)
    /// over the whole graph; infinite when no kinked op is present. Used to
    /// reject finite-difference probe points that straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let input = match node.op {
                Op::Relu(a) | Op::L1Norm(a) => a,
                _ => continue,
            };
            for &x in self.nodes[input.0].value.data() {
                margin = margin.min(x.abs());
            }
        }
        margin
    }
}

fn cosine_adjoint(a: &Tensor, b: &Tensor, g: f64) -> Result<(Tensor, Tensor)> {
    let dot = a.dot(b)?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    let ga = na + NORM_EPS;
    let gb = nb + NORM_EPS;
    let denom = ga * gb;
    // d cos / da = b/(ga*gb) - dot * (a/na) / (ga^2 * gb); the second term is
    // dropped at the (non-differentiable) zero vector.
    let da = if na > NORM_EPS {
        b.scale(g / denom)
            .add(&a.scale(-g * dot / (na * ga * denom)))?
    } else {
        b.scale(g / denom)
    };
    let db = if nb > NORM_EPS {
        a.scale(g / denom)
            .add(&b.scale(-g * dot / (nb * gb * denom)))?
    } else {
        a.scale(g / denom)
    };
    Ok((da, db))
}

/// Maximum relative error between analytic gradients and central finite
/// differences at `points`, for the scalar function described by `build`.
///
/// The error for one coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
/// Callers are responsible for probing away from subgradient kinks (see
/// [`Graph::kink_margin`]).
pub fn grad_check<F>(build: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = points.iter().map(|p| graph.leaf(p.clone())).collect();
    let root = build(&mut graph, &leaves)?;
    grad_check_at(&mut graph, root, &leaves, eps)
}

/// [`grad_check`] over an already-built graph, probing the given leaves.
/// Leaf values are restored before returning.
pub fn grad_check_at(
    graph: &mut Graph,
    root: NodeId,
    leaves: &[NodeId],
    eps: f64,
) -> Result<f64> {
    if graph.shape(root) != (1, 1) {
        return Err(Error::NotScalar {
            op: "grad_check",
            shape: graph.dims(root),
        });
    }

    let analytic = graph.backward(root)?;
    let mut max_rel = 0.0_f64;

    for &leaf in leaves {
        let shape = graph.shape(leaf);
        let grad = analytic.dense(leaf, shape);
        for idx in 0..shape.0 * shape.1 {
            let orig = graph.value(leaf).data()[idx];
            graph.nudge_leaf(leaf, idx, orig + eps)?;
            let up = graph.forward(root)?.scalar_value()?;
            graph.nudge_leaf(leaf, idx, orig - eps)?;
            let down = graph.forward(root)?.scalar_value()?;
            graph.nudge_leaf(leaf, idx, orig)?;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / (1e-12_f64).max(a.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    // Restore cached intermediate values to the unperturbed point.
    graph.forward(root)?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Random tensor with entries bounded away from zero, for kinked ops.
    fn random_tensor_off_kink(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let sign = if rng.coin() { 1.0 } else { -1.0 };
                sign * rng.uniform(0.2, 1.5)
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn square_of_three_is_nine_with_gradient_six() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data()[0], 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn matmul_with_identity_is_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = g.leaf(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let eye_t = g.transpose(eye);
        let y = g.matmul(x, eye_t).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.leaf(Tensor::scalar(5.0));
        let _ = x;
        let y = g.mul(c, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 3));
        let err = g.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    /// Composition of concat, matmul, relu on a 2x3 input, checked against a
    /// plain scalar-loop evaluation that never touches the graph.
    #[test]
    fn composition_matches_scalar_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let x = random_tensor(&mut rng, 2, 3);
        let w = random_tensor(&mut rng, 6, 4);

        let mut g = Graph::new();
        let xl = g.leaf(x.clone());
        let wl = g.leaf(w.clone());
        let cat = g.concat_cols(xl, xl).unwrap(); // 2x6
        let h = g.matmul(cat, wl).unwrap(); // 2x4
        let r = g.relu(h);
        let out = g.sum(r);

        // Independent evaluation with nested loops.
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for p in 0..6 {
                    let xv = x.get(i, p % 3);
                    acc += xv * w.get(p, j);
                }
                expected += acc.max(0.0);
            }
        }
        assert!((g.value(out).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_linearity_is_exact() {
        let mut rng = SplitMix64::new(23);
        let x = random_tensor(&mut rng, 3, 3);
        let a = random_tensor(&mut rng, 3, 3);

        let build_f = |g: &mut Graph, x: NodeId, a: NodeId| {
            let m = g.matmul(x, a).unwrap();
            g.sum(m)
        };
        let build_h = |g: &mut Graph, x: NodeId| {
            let s = g.sigmoid(x);
            g.mean(s)
        };

        // f + h in one graph.
        let mut g = Graph::new();
        let xl = g.leaf(x.clone());
        let al = g.leaf(a.clone());
        let f = build_f(&mut g, xl, al);
        let h = build_h(&mut g, xl);
        let total = g.add(f, h).unwrap();
        let combined = g.backward(total).unwrap().dense(xl, (3, 3));

        // f and h in separate graphs.
        let mut g1 = Graph::new();
        let x1 = g1.leaf(x.clone());
        let a1 = g1.leaf(a.clone());
        let f1 = build_f(&mut g1, x1, a1);
        let gf = g1.backward(f1).unwrap().dense(x1, (3, 3));

        let mut g2 = Graph::new();
        let x2 = g2.leaf(x);
        let h2 = build_h(&mut g2, x2);
        let gh = g2.backward(h2).unwrap().dense(x2, (3, 3));

        let summed = gf.add(&gh).unwrap();
        for (c, s) in combined.data().iter().zip(summed.data()) {
            assert!((c - s).abs() <= 1e-12, "{c} vs {s}");
        }
    }

    #[test]
    fn forward_backward_is_bit_identical_on_rerun() {
        let mut rng = SplitMix64::new(5);
        let x = random_tensor(&mut rng, 4, 4);
        let run = || {
            let mut g = Graph::new();
            let xl = g.leaf(x.clone());
            let s = g.sigmoid(xl);
            let m = g.matmul(s, xl).unwrap();
            let n = g.l2_norm(m);
            let grads = g.backward(n).unwrap();
            (
                g.value(n).data()[0].to_bits(),
                grads
                    .dense(xl, (4, 4))
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_linear_is_essentially_exact() {
        let mut rng = SplitMix64::new(9);
        let x = random_tensor(&mut rng, 2, 5);
        let err = grad_check(
            |g, leaves| {
                let s = g.scale(leaves[0], 3.5);
                Ok(g.sum(s))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "linear grad check err {err}");
    }

    #[test]
    fn grad_check_sigmoid_chain() {
        let x = Tensor::scalar(0.5);
        let err = grad_check(
            |g, leaves| {
                let s1 = g.sigmoid(leaves[0]);
                let s2 = g.sigmoid(s1);
                Ok(g.sum(s2))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "sigmoid chain err {err}");
    }

    /// Every primitive's adjoint against central finite differences on 100
    /// random small tensors.
    #[test]
    fn primitive_adjoints_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        let eps = 1e-6;
        let tol = 1e-6;

        for case in 0..100 {
            let rows = 1 + rng.index(3);
            let cols = 1 + rng.index(3);

            // Smooth binary ops.
            let a = random_tensor(&mut rng, rows, cols);
            let b = random_tensor(&mut rng, rows, cols);
            let m = random_tensor(&mut rng, cols, 2);
            // Norm-based ops need >= 2 entries: a 1x1 "vector" makes cosine
            // and normalization piecewise constant, which finite differences
            // cannot resolve.
            let vcols = 2 + rng.index(4);
            let va = random_tensor(&mut rng, 1, vcols);
            let vb = random_tensor(&mut rng, 1, vcols);

            let checks: Vec<(&str, f64)> = vec![
                (
                    "matmul",
                    grad_check(
                        |g, l| {
                            let p = g.matmul(l[0], l[1])?;
                            Ok(g.sum(p))
                        },
                        &[a.clone(), m.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "transpose",
                    grad_check(
                        |g, l| {
                            let t = g.transpose(l[0]);
                            let p = g.mul(t, l[1])?;
                            Ok(g.sum(p))
                        },
                        &[a.clone(), a.transpose()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "add_sub_mul_scale",
                    grad_check(
                        |g, l| {
                            let s = g.add(l[0], l[1])?;
                            let d = g.sub(s, l[1])?;
                            let p = g.mul(d, l[1])?;
                            let sc = g.scale(p, -0.7);
                            Ok(g.sum(sc))
                        },
                        &[a.clone(), b.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "sigmoid_mean",
                    grad_check(
                        |g, l| {
                            let s = g.sigmoid(l[0]);
                            Ok(g.mean(s))
                        },
                        &[a.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "concat_slice",
                    grad_check(
                        |g, l| {
                            let cat = g.concat_cols(l[0], l[1])?;
                            let left = g.slice_cols(cat, 0, cols)?;
                            let rows_half = g.slice_rows(cat, 0, rows)?;
                            let s1 = g.sum(left);
                            let s2 = g.l2_norm(rows_half);
                            g.add(s1, s2)
                        },
                        &[a.clone(), b.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "l2_cosine",
                    grad_check(
                        |g, l| {
                            let c = g.cosine(l[0], l[1])?;
                            let n = g.l2_norm(l[0]);
                            g.add(c, n)
                        },
                        &[va.clone(), vb.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
                (
                    "scale_by_recip",
                    grad_check(
                        |g, l| {
                            let n = g.l2_norm(l[0]);
                            let r = g.recip_clamped(n, NORM_EPS)?;
                            let unit = g.scale_by(l[0], r)?;
                            let w = g.mul(unit, l[1])?;
                            Ok(g.sum(w))
                        },
                        &[va.clone(), vb.clone()],
                        eps,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < tol, "case {case}: {name} rel err {err}");
            }

            // Kinked ops probe points bounded away from the kink.
            let ka = random_tensor_off_kink(&mut rng, rows, cols);
            let err = grad_check(
                |g, l| {
                    let r = g.relu(l[0]);
                    let l1 = g.l1_norm(l[0]);
                    let s = g.sum(r);
                    g.add(s, l1)
                },
                &[ka],
                eps,
            )
            .unwrap();
            assert!(err < tol, "case {case}: relu/l1 rel err {err}");

            // BCE with logits; targets in (0,1) to exercise both adjoints.
            let z = random_tensor(&mut rng, 1, 4);
            let t = Tensor::from_vec(1, 4, (0..4).map(|_| rng.uniform(0.1, 0.9)).collect())
                .unwrap();
            let err = grad_check(
                |g, l| g.bce_with_logits(l[0], l[1]),
                &[z, t],
                eps,
            )
            .unwrap();
            assert!(err < tol, "case {case}: bce rel err {err}");
        }
    }

    #[test]
    fn bce_known_values() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(1, 2, vec![0.0, 30.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap());
        let loss = g.bce_with_logits(z, t).unwrap();
        // mean(ln 2, ~0)
        let expected = 0.5 * std::f64::consts::LN_2;
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.dense(x, (1, 1)).data()[0], 0.0);
    }

    #[test]
    fn kink_margin_reports_smallest_relu_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![-0.4, 0.05, 2.0]).unwrap());
        let _ = g.relu(x);
        assert_eq!(g.kink_margin(), 0.05);
    }
}
