use std::collections::BTreeMap;

use super::params::{GradMap, ParameterStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Parents always have smaller ids than children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive catalog. Every kind has an exact backward rule in [`Tape::gradients`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Matmul,
    /// Elementwise add; the right operand may broadcast as a row `[c]`/`[1,c]`,
    /// a column `[r,1]`, or a scalar.
    Add,
    /// Same broadcasting rules as [`Op::Add`].
    Subtract,
    Hadamard,
    /// `factor * x + offset`.
    Scale { factor: f64, offset: f64 },
    Transpose,
    Reshape(Vec<usize>),
    ConcatLast,
    /// Sum over the last axis.
    RowSum,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    /// Inputs: `x`, a one-element slope tensor.
    Prelu,
    SoftmaxVector,
    Mse,
    /// Mean over rows of the fused log-sum-exp cross-entropy against the labels.
    SoftmaxCrossEntropy(Vec<usize>),
    LookupRows(Vec<usize>),
    GradientReverse,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Subtract => "subtract",
            Op::Hadamard => "hadamard",
            Op::Scale { .. } => "scale",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatLast => "concat-last-axis",
            Op::RowSum => "row-sum",
            Op::Mean => "mean",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Prelu => "prelu",
            Op::SoftmaxVector => "softmax-vector",
            Op::Mse => "mse",
            Op::SoftmaxCrossEntropy(_) => "softmax-cross-entropy",
            Op::LookupRows(_) => "lookup-rows",
            Op::GradientReverse => "gradient-reverse",
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Constant,
    Param(String),
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    parents: Vec<NodeId>,
    value: Tensor,
    saved: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(Broadcast::Same);
    }
    if sa.len() == 2 {
        let (r, c) = (sa[0], sa[1]);
        if sb == [c] || sb == [1, c] {
            return Ok(Broadcast::Row);
        }
        if sb == [r, 1] {
            return Ok(Broadcast::Col);
        }
    }
    if b.len() == 1 {
        return Ok(Broadcast::Scalar);
    }
    Err(Error::Shape { op, shapes: vec![sa.to_vec(), sb.to_vec()] })
}

fn broadcast_apply(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    let c = a.cols();
    let bd = b.data();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let rhs = match kind {
            Broadcast::Same => bd[idx],
            Broadcast::Row => bd[idx % c],
            Broadcast::Col => bd[idx / c],
            Broadcast::Scalar => bd[0],
        };
        *v = f(*v, rhs);
    }
    out
}

fn broadcast_reduce(g: &Tensor, b_shape: &[usize], kind: Broadcast) -> Tensor {
    let mut out = Tensor::zeros(b_shape);
    let c = g.cols();
    let od = out.data_mut();
    for (idx, &v) in g.data().iter().enumerate() {
        match kind {
            Broadcast::Same => od[idx] += v,
            Broadcast::Row => od[idx % c] += v,
            Broadcast::Col => od[idx / c] += v,
            Broadcast::Scalar => od[0] += v,
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
thread_local! {
    /// Mutation hook for the gradient checker's own tests: scales the sigmoid backward rule.
    pub(crate) static CORRUPT_SIGMOID: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Per-node gradients produced by a reverse sweep.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Operation tape for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Parameter name for leaves created by [`Tape::param`].
    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].source {
            Source::Param(name) => Some(name),
            _ => None,
        }
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    fn push(&mut self, source: Source, parents: Vec<NodeId>, value: Tensor, saved: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(parents.iter().all(|p| p.0 < id.0));
        self.nodes.push(Node { source, parents, value, saved });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Constant, vec![], value, None)
    }

    /// Leaf bound to a store entry. Repeated calls with the same name share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let id = self.push(Source::Param(name.to_string()), vec![], value, None);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Evaluates `op` on `inputs` and records the node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let name = op.name();
        let arity = match op {
            Op::Matmul | Op::Add | Op::Subtract | Op::Hadamard | Op::Prelu | Op::Mse => 2,
            Op::ConcatLast => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!("{name} expects {arity} inputs, got {}", inputs.len())));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let shape_err = |vals: &[&Tensor]| Error::Shape { op: name, shapes: vals.iter().map(|t| t.shape().to_vec()).collect() };
        let mut saved = None;
        let value = match &op {
            Op::Matmul => vals[0].matmul(vals[1])?,
            Op::Add => {
                let k = broadcast_kind(name, vals[0], vals[1])?;
                broadcast_apply(vals[0], vals[1], k, |a, b| a + b)
            }
            Op::Subtract => {
                let k = broadcast_kind(name, vals[0], vals[1])?;
                broadcast_apply(vals[0], vals[1], k, |a, b| a - b)
            }
            Op::Hadamard => vals[0].zip_with(vals[1], |a, b| a * b).map_err(|_| shape_err(&vals))?,
            Op::Scale { factor, offset } => vals[0].map(|x| factor * x + offset),
            Op::Transpose => vals[0].transpose()?,
            Op::Reshape(shape) => vals[0].clone().reshaped(shape)?,
            Op::ConcatLast => {
                if vals.iter().any(|v| v.rank() != 2) || vals.iter().any(|v| v.rows() != vals[0].rows()) {
                    return Err(shape_err(&vals));
                }
                let rows = vals[0].rows();
                let total: usize = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row(r));
                    }
                }
                Tensor::matrix(rows, total, data)
            }
            Op::RowSum => {
                let x = vals[0];
                let (out_shape, last) = match x.rank() {
                    0 => (vec![], 1),
                    r => (x.shape()[..r - 1].to_vec(), x.shape()[r - 1]),
                };
                let data: Vec<f64> = x.data().chunks(last.max(1)).map(|c| c.iter().sum()).collect();
                Tensor::new(out_shape, data)?
            }
            Op::Mean => {
                if vals[0].is_empty() {
                    return Err(shape_err(&vals));
                }
                Tensor::scalar(vals[0].sum() / vals[0].len() as f64)
            }
            Op::Sigmoid => vals[0].map(sigmoid),
            Op::Tanh => vals[0].map(f64::tanh),
            Op::Relu => vals[0].map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Prelu => {
                if vals[1].len() != 1 {
                    return Err(shape_err(&vals));
                }
                let a = vals[1].item();
                vals[0].map(|x| if x > 0.0 { x } else { a * x })
            }
            Op::SoftmaxVector => {
                let x = vals[0];
                if x.rank() != 1 || x.is_empty() {
                    return Err(shape_err(&vals));
                }
                let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                Tensor::vector(e.into_iter().map(|v| v / s).collect())
            }
            Op::Mse => {
                if vals[0].shape() != vals[1].shape() || vals[0].is_empty() {
                    return Err(shape_err(&vals));
                }
                let n = vals[0].len() as f64;
                let s: f64 = vals[0].data().iter().zip(vals[1].data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Tensor::scalar(s / n)
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let x = vals[0];
                if x.rank() != 2 || x.rows() != labels.len() || x.rows() == 0 {
                    return Err(shape_err(&vals));
                }
                let k = x.cols();
                if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
                }
                let mut probs = Vec::with_capacity(x.len());
                let mut total = 0.0;
                for (r, &label) in labels.iter().enumerate() {
                    let row = x.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    total += lse - row[label];
                    probs.extend(row.iter().map(|v| (v - lse).exp()));
                }
                saved = Some(Tensor::matrix(x.rows(), k, probs));
                Tensor::scalar(total / labels.len() as f64)
            }
            Op::LookupRows(idx) => {
                let x = vals[0];
                if x.rank() != 2 {
                    return Err(shape_err(&vals));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::invalid(format!("lookup index {bad} out of range for {} rows", x.rows())));
                }
                let c = x.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(x.row(i));
                }
                Tensor::matrix(idx.len(), c, data)
            }
            Op::GradientReverse => vals[0].clone(),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(self.push(Source::Op(op), inputs.to_vec(), value, saved))
    }

    /// Reverse sweep from a scalar root.
    pub fn gradients(&self, root: NodeId) -> Result<NodeGrads> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape { op: "backward", shapes: vec![self.nodes[root.0].value.shape().to_vec()] });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Source::Op(op) = &node.source {
                let contributions = self.backward_rule(op, node, &g)?;
                for (p, pg) in node.parents.iter().zip(contributions) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `root` for every store entry; entries not reached get zeros.
    pub fn backward(&self, root: NodeId, store: &ParameterStore) -> Result<GradMap> {
        let ng = self.gradients(root)?;
        let mut out = GradMap::new();
        for (name, entry) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|id| ng.wrt(*id).cloned())
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }

    fn backward_rule(&self, op: &Op, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let y = &node.value;
        Ok(match op {
            Op::Matmul => {
                let (a, b) = (pv(0), pv(1));
                vec![g.matmul(&b.transpose()?)?, a.transpose()?.matmul(g)?]
            }
            Op::Add | Op::Subtract => {
                let (a, b) = (pv(0), pv(1));
                let k = broadcast_kind(op.name(), a, b)?;
                let mut gb = broadcast_reduce(g, b.shape(), k);
                if *op == Op::Subtract {
                    gb = gb.map(|v| -v);
                }
                vec![g.clone(), gb]
            }
            Op::Hadamard => {
                let (a, b) = (pv(0), pv(1));
                vec![g.zip_with(b, |u, v| u * v)?, g.zip_with(a, |u, v| u * v)?]
            }
            Op::Scale { factor, .. } => vec![g.map(|v| v * factor)],
            Op::Transpose => vec![g.transpose()?],
            Op::Reshape(_) => vec![g.clone().reshaped(pv(0).shape())?],
            Op::ConcatLast => {
                let rows = y.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for k in 0..node.parents.len() {
                    let c = pv(k).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    out.push(Tensor::matrix(rows, c, data));
                    offset += c;
                }
                out
            }
            Op::RowSum => {
                let x = pv(0);
                let last = match x.rank() {
                    0 => 1,
                    r => x.shape()[r - 1],
                };
                let mut out = Tensor::zeros(x.shape());
                for (idx, v) in out.data_mut().iter_mut().enumerate() {
                    *v = g.data()[idx / last.max(1)];
                }
                vec![out]
            }
            Op::Mean => {
                let x = pv(0);
                vec![Tensor::full(x.shape(), g.item() / x.len() as f64)]
            }
            Op::Sigmoid => {
                #[allow(unused_mut)]
                let mut scale = 1.0;
                #[cfg(test)]
                if CORRUPT_SIGMOID.with(|c| c.get()) {
                    scale = 1.5;
                }
                vec![g.zip_with(y, |u, s| scale * u * s * (1.0 - s))?]
            }
            Op::Tanh => vec![g.zip_with(y, |u, t| u * (1.0 - t * t))?],
            Op::Relu => vec![g.zip_with(pv(0), |u, x| if x > 0.0 { u } else { 0.0 })?],
            Op::Prelu => {
                let (x, a) = (pv(0), pv(1));
                let slope = a.item();
                let gx = g.zip_with(x, |u, v| if v > 0.0 { u } else { slope * u })?;
                let ga: f64 = g.data().iter().zip(x.data()).map(|(u, v)| if *v > 0.0 { 0.0 } else { u * v }).sum();
                vec![gx, Tensor::full(a.shape(), ga)]
            }
            Op::SoftmaxVector => {
                let dot: f64 = g.data().iter().zip(y.data()).map(|(u, s)| u * s).sum();
                vec![g.zip_with(y, |u, s| s * (u - dot))?]
            }
            Op::Mse => {
                let (a, b) = (pv(0), pv(1));
                let k = 2.0 * g.item() / a.len() as f64;
                let ga = a.zip_with(b, |u, v| k * (u - v))?;
                let gb = ga.map(|v| -v);
                vec![ga, gb]
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let probs = node.saved.as_ref().expect("softmax-cross-entropy saves probabilities");
                let k = probs.cols();
                let scale = g.item() / labels.len() as f64;
                let mut out = probs.map(|p| p * scale);
                for (r, &l) in labels.iter().enumerate() {
                    out.data_mut()[r * k + l] -= scale;
                }
                vec![out]
            }
            Op::LookupRows(idx) => {
                let x = pv(0);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row(r);
                    let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![out]
            }
            Op::GradientReverse => vec![g.map(|v| -v)],
        })
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Hadamard, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64, offset: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor, offset }, &[x])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatLast, xs)
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        self.apply(Op::Prelu, &[x, slope])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SoftmaxVector, &[x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mse, &[a, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Op::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }

    pub fn lookup_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.apply(Op::LookupRows(idx.to_vec()), &[table])
    }

    pub fn gradient_reverse(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GradientReverse, &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let r = t.row_sum(x).unwrap();
        let g = t.gradients(r).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_reverse_flips_sign_exactly() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let r = t.gradient_reverse(x).unwrap();
        assert_eq!(t.value(r), t.value(x));
        let s = t.row_sum(r).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, -1.0, -1.0]);

        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let r = t.gradient_reverse(x).unwrap();
        let r2 = t.gradient_reverse(r).unwrap();
        let s = t.row_sum(r2).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut store = ParameterStore::new();
        store.insert("y", Tensor::vector(vec![1.0, 2.0, 3.0]), super::super::Init::Zeros);
        let mut t = Tape::new();
        let a = t.param(&store, "y").unwrap();
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = t.mse(a, b).unwrap();
        let g = t.backward(l, &store).unwrap();
        assert!(g["y"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(x).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.gradients(x).is_err());
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { shapes, .. }) => assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(t.scale(x, 1e300, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 2]));
        let row = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let col = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]));
        let s1 = t.add(a, row).unwrap();
        let s2 = t.add(s1, col).unwrap();
        assert_eq!(t.value(s2).data(), &[2.0, 3.0, 3.0, 4.0, 4.0, 5.0]);
        let m = t.mean(s2).unwrap();
        let g = t.gradients(m).unwrap();
        assert_eq!(g.wrt(row).unwrap().data(), &[0.5, 0.5]);
        let gc = g.wrt(col).unwrap().data();
        assert!(gc.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
