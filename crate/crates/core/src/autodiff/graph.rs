use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cross-channel local response normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrnConfig {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnConfig {
    fn default() -> Self {
        Self {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

/// Named parameter tensors. Every graph that references a `ParamId` reads the
/// same storage, which is how multi-column models share weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.sq_norm().as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Operation kinds understood by the graph. Each has a forward and an
/// adjoint rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    MaxPool,
    Relu,
    FullyConnected,
    SoftmaxXent,
    SqNorm,
    Sub,
    Add,
    Concat,
    Spp,
    Lrn,
    Flatten,
    Gather,
    Sum,
    Scale,
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(ParamId),
    Conv2d { stride: usize, pad: usize },
    MaxPool { window: usize, stride: usize },
    Relu,
    Linear,
    SoftmaxXent { labels: Vec<usize> },
    SqNorm,
    Sub,
    Add,
    Concat,
    Spp { levels: usize },
    Lrn(LrnConfig),
    Flatten,
    Gather { rows: Vec<usize> },
    Sum,
    Scale(f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Relu => OpKind::Relu,
            Op::Linear => OpKind::FullyConnected,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::SqNorm => OpKind::SqNorm,
            Op::Sub => OpKind::Sub,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::Concat,
            Op::Spp { .. } => OpKind::Spp,
            Op::Lrn(_) => OpKind::Lrn,
            Op::Flatten => OpKind::Flatten,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sum => OpKind::Sum,
            Op::Scale(_) => OpKind::Scale,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

/// Forward-pass state the adjoint rules read back.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Scale(Vec<T>),
    Probs(Vec<T>),
}

/// Static computation graph. Nodes are appended in topological order by the
/// builder methods; [`Graph::forward`] evaluates them against a parameter
/// set and named inputs, [`Graph::backward`] runs the adjoint sweep.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input(_) => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()), vec![])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), vec![])
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b])
    }

    /// Floor-mode max pooling over `window`x`window` cells.
    pub fn maxpool(&mut self, x: NodeId, window: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool { window, stride }, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`; computes `x·wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Linear, vec![x, w, b])
    }

    /// Mean cross-entropy of `logits: [N, K]` (or `[K]`) against `labels`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxXent { labels }, vec![logits])
    }

    /// Sum of squares over the last axis.
    pub fn sq_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SqNorm, vec![x])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    /// Concatenation of `[N, d_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat, parts.to_vec())
    }

    /// Spatial pyramid max pooling with `levels` levels (1x1 up to LxL bins).
    pub fn spp(&mut self, x: NodeId, levels: usize) -> NodeId {
        self.push(Op::Spp { levels }, vec![x])
    }

    pub fn lrn(&mut self, x: NodeId, cfg: LrnConfig) -> NodeId {
        self.push(Op::Lrn(cfg), vec![x])
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, vec![x])
    }

    /// Selects rows along the first axis (repeats allowed).
    pub fn gather(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::Gather { rows }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values
            .get(id.0)
            .and_then(Option::as_ref)
            .expect("forward has not produced this node")
    }

    /// Names of all input placeholders, in insertion order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node. Inputs are matched to placeholders by name.
    pub fn forward(
        &mut self,
        params: &ParamSet<T>,
        inputs: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.values = vec![None; self.nodes.len()];
        self.aux = vec![Aux::None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let (value, aux) = self.eval(i, params, inputs)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "{:?} (node {i})",
                    self.nodes[i].op.kind()
                )));
            }
            self.values[i] = Some(value);
            self.aux[i] = aux;
        }
        Ok(())
    }

    fn eval(
        &self,
        i: usize,
        params: &ParamSet<T>,
        inputs: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let node = &self.nodes[i];
        let arg = |k: usize| self.value(node.inputs[k]);
        let plain = |t: Tensor<T>| Ok((t, Aux::None));
        match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| shape_err(format!("missing input `{name}`")))?;
                plain(t.clone())
            }
            Op::Param(id) => {
                if id.0 >= params.len() {
                    return Err(shape_err(format!("unknown parameter {}", id.0)));
                }
                plain(params.get(*id).clone())
            }
            Op::Conv2d { stride, pad } => {
                plain(conv2d_forward(arg(0), arg(1), arg(2), *stride, *pad)?)
            }
            Op::MaxPool { window, stride } => {
                let (t, idx) = maxpool_forward(arg(0), *window, *stride)?;
                Ok((t, Aux::Argmax(idx)))
            }
            Op::Relu => {
                let x = arg(0);
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                plain(Tensor::from_vec(x.shape(), data)?)
            }
            Op::Linear => plain(linear_forward(arg(0), arg(1), arg(2))?),
            Op::SoftmaxXent { labels } => {
                let (loss, probs) = softmax_xent_forward(arg(0), labels)?;
                Ok((loss, Aux::Probs(probs)))
            }
            Op::SqNorm => {
                let x = arg(0);
                let d = *x.shape().last().ok_or_else(|| shape_err("sq_norm of a scalar"))?;
                let out: Vec<T> = x
                    .data()
                    .chunks_exact(d.max(1))
                    .map(|row| row.iter().map(|&v| v * v).sum())
                    .collect();
                let shape = &x.shape()[..x.shape().len() - 1];
                plain(Tensor::from_vec(shape, out)?)
            }
            Op::Add | Op::Sub => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!(
                        "elementwise {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let sign = if matches!(node.op, Op::Add) {
                    T::one()
                } else {
                    -T::one()
                };
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| x + sign * y)
                    .collect();
                plain(Tensor::from_vec(a.shape(), data)?)
            }
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&n| self.value(n)).collect();
                plain(concat_forward(&parts)?)
            }
            Op::Spp { levels } => {
                let (t, idx) = spp_forward(arg(0), *levels)?;
                Ok((t, Aux::Argmax(idx)))
            }
            Op::Lrn(cfg) => {
                let (t, scale) = lrn_forward(arg(0), cfg)?;
                Ok((t, Aux::Scale(scale)))
            }
            Op::Flatten => {
                let x = arg(0);
                let n = x.rows();
                let rest = x.len() / n.max(1);
                plain(x.clone().reshape(&[n, rest])?)
            }
            Op::Gather { rows } => {
                let x = arg(0);
                if x.shape().is_empty() {
                    return Err(shape_err("gather from a scalar"));
                }
                let n = x.shape()[0];
                let width = x.len() / n.max(1);
                let mut data = Vec::with_capacity(rows.len() * width);
                for &r in rows {
                    if r >= n {
                        return Err(shape_err(format!("gather row {r} of {n}")));
                    }
                    data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows.len();
                plain(Tensor::from_vec(&shape, data)?)
            }
            Op::Sum => plain(Tensor::scalar(arg(0).data().iter().copied().sum())),
            Op::Scale(c) => {
                let mut t = arg(0).clone();
                t.scale_in_place(T::from_f64(*c));
                plain(t)
            }
        }
    }

    /// Gradient of the scalar `loss` node with respect to every parameter.
    pub fn backward(&self, params: &ParamSet<T>, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::LossNotScalar(loss_value.len()));
        }
        let mut out = Gradients::zeros_like(params);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_vec(loss_value.shape(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.tensors[id.0].add_assign(&g);
                continue;
            }
            let input_grads = self.adjoint(i, &g)?;
            for (k, ig) in input_grads.into_iter().enumerate() {
                let Some(ig) = ig else { continue };
                let src = node.inputs[k];
                match &mut grads[src.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let want = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let arg = |k: usize| self.value(node.inputs[k]);
        Ok(match &node.op {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Conv2d { stride, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(arg(0), arg(1), g, *stride, *pad, want(0))?;
                vec![dx, Some(dw), Some(db)]
            }
            Op::MaxPool { .. } | Op::Spp { .. } => {
                let Aux::Argmax(idx) = &self.aux[i] else {
                    unreachable!()
                };
                vec![Some(scatter_argmax(arg(0), idx, g))]
            }
            Op::Relu => {
                let x = arg(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), data)?)]
            }
            Op::Linear => {
                let (dx, dw, db) = linear_backward(arg(0), arg(1), g, want(0))?;
                vec![dx, Some(dw), Some(db)]
            }
            Op::SoftmaxXent { labels } => {
                let Aux::Probs(probs) = &self.aux[i] else {
                    unreachable!()
                };
                let x = arg(0);
                let k = *x.shape().last().unwrap();
                let n = labels.len();
                let scale = g.item() / T::from_f64(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] = d[row * k + label] - scale;
                }
                vec![Some(Tensor::from_vec(x.shape(), d)?)]
            }
            Op::SqNorm => {
                let x = arg(0);
                let d = *x.shape().last().unwrap();
                let two = T::from_f64(2.0);
                let mut out = Vec::with_capacity(x.len());
                for (row, &gv) in x.data().chunks_exact(d.max(1)).zip(g.data()) {
                    out.extend(row.iter().map(|&v| two * v * gv));
                }
                vec![Some(Tensor::from_vec(x.shape(), out)?)]
            }
            Op::Add => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| g.clone()),
            ],
            Op::Sub => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| {
                    let mut t = g.clone();
                    t.scale_in_place(-T::one());
                    t
                }),
            ],
            Op::Concat => {
                let n = g.rows();
                let total = g.len() / n;
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for (k, &src) in node.inputs.iter().enumerate() {
                    let part = self.value(src);
                    let w = part.len() / n;
                    if want(k) {
                        let mut data = Vec::with_capacity(part.len());
                        for r in 0..n {
                            let start = r * total + offset;
                            data.extend_from_slice(&g.data()[start..start + w]);
                        }
                        out.push(Some(Tensor::from_vec(part.shape(), data)?));
                    } else {
                        out.push(None);
                    }
                    offset += w;
                }
                out
            }
            Op::Lrn(cfg) => {
                let Aux::Scale(scale) = &self.aux[i] else {
                    unreachable!()
                };
                vec![Some(lrn_backward(arg(0), self.value(NodeId(i)), scale, g, cfg))]
            }
            Op::Flatten => vec![Some(g.clone().reshape(arg(0).shape())?)],
            Op::Gather { rows } => {
                let x = arg(0);
                let width = x.len() / x.shape()[0].max(1);
                let mut d = Tensor::zeros(x.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * width..(k + 1) * width];
                    let dst = &mut d.data_mut()[r * width..(r + 1) * width];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                vec![Some(d)]
            }
            Op::Sum => {
                let x = arg(0);
                vec![Some(Tensor::from_vec(x.shape(), vec![g.item(); x.len()])?)]
            }
            Op::Scale(c) => {
                let mut t = g.clone();
                t.scale_in_place(T::from_f64(*c));
                vec![Some(t)]
            }
        })
    }

    /// Fingerprint of every piecewise-linear switch taken during the last
    /// forward pass: ReLU signs and pooling argmax positions. Two passes with
    /// the same fingerprint lie in the same smooth region.
    pub fn switch_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match (&node.op, &self.aux[i]) {
                (Op::Relu, _) => {
                    for v in self.value(node.inputs[0]).data() {
                        (*v > T::zero()).hash(&mut h);
                        (*v == T::zero()).hash(&mut h);
                    }
                }
                (_, Aux::Argmax(idx)) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Count of nodes per kind, for diagnostics.
    pub fn histogram(&self) -> HashMap<OpKind, usize> {
        let mut m = HashMap::new();
        for n in &self.nodes {
            *m.entry(n.op.kind()).or_insert(0) += 1;
        }
        m
    }
}

fn dims4(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(format!("{what} expects [N, C, H, W], got {:?}", t.shape()))),
    }
}

pub(crate) fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (o, wc, kh, kw) = dims4(wt, "conv2d weight")?;
    if wc != c {
        return Err(shape_err(format!("conv2d: input has {c} channels, kernel expects {wc}")));
    }
    let ho = conv_out(h, kh, stride, pad)
        .ok_or_else(|| shape_err(format!("conv2d: {h}x{w} input smaller than {kh}x{kw} kernel")))?;
    let wo = conv_out(w, kw, stride, pad)
        .ok_or_else(|| shape_err(format!("conv2d: {h}x{w} input smaller than {kh}x{kw} kernel")))?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
    })
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
    } = conv_geom(x, wt, stride, pad)?;
    if b.len() != o {
        return Err(shape_err(format!("conv2d bias has {} entries, need {o}", b.len())));
    }
    let ckk = c * kh * kw;
    let hw = ho * wo;
    let mut col = vec![T::zero(); ckk * hw];
    let mut out = vec![T::zero(); n * o * hw];
    for img in 0..n {
        let xs = &x.data()[img * c * h * w..(img + 1) * c * h * w];
        im2col(xs, c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
        let ys = &mut out[img * o * hw..(img + 1) * o * hw];
        for (oc, row) in ys.chunks_exact_mut(hw).enumerate() {
            row.fill(b.data()[oc]);
        }
        T::gemm(
            o,
            ckk,
            hw,
            T::one(),
            wt.data(),
            ckk as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            ys,
            hw as isize,
            1,
        );
    }
    Tensor::from_vec(&[n, o, ho, wo], out)
}

type Triple<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<Triple<T>> {
    let ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
    } = conv_geom(x, wt, stride, pad)?;
    let ckk = c * kh * kw;
    let hw = ho * wo;
    let mut col = vec![T::zero(); ckk * hw];
    let mut dcol = vec![T::zero(); ckk * hw];
    let mut dw = Tensor::zeros(wt.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for img in 0..n {
        let xs = &x.data()[img * c * h * w..(img + 1) * c * h * w];
        let gs = &g.data()[img * o * hw..(img + 1) * o * hw];
        im2col(xs, c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
        // dW += dY · colᵀ
        T::gemm(
            o,
            hw,
            ckk,
            T::one(),
            gs,
            hw as isize,
            1,
            &col,
            1,
            hw as isize,
            T::one(),
            dw.data_mut(),
            ckk as isize,
            1,
        );
        for (oc, row) in gs.chunks_exact(hw).enumerate() {
            let s: T = row.iter().copied().sum();
            db.data_mut()[oc] = db.data()[oc] + s;
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            T::gemm(
                ckk,
                o,
                hw,
                T::one(),
                wt.data(),
                1,
                ckk as isize,
                gs,
                hw as isize,
                1,
                T::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            let dxs = &mut dx.data_mut()[img * c * h * w..(img + 1) * c * h * w];
            col2im(&dcol, c, h, w, kh, kw, stride, pad, ho, wo, dxs);
        }
    }
    Ok((dx, dw, db))
}

fn maxpool_forward<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = dims4(x, "maxpool")?;
    let ho = conv_out(h, k, stride, 0)
        .ok_or_else(|| shape_err(format!("maxpool: {h}x{w} input smaller than window {k}")))?;
    let wo = conv_out(w, k, stride, 0)
        .ok_or_else(|| shape_err(format!("maxpool: {h}x{w} input smaller than window {k}")))?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        let base = idx.len() / (ho * wo) * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (v, at) = window_max(plane, w, oy * stride, oy * stride + k, ox * stride, ox * stride + k);
                out.push(v);
                idx.push((base + at) as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, idx))
}

/// First maximal element in scan order within rows `y0..y1`, cols `x0..x1`.
fn window_max<T: Real>(plane: &[T], w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> (T, usize) {
    let mut best = plane[y0 * w + x0];
    let mut at = y0 * w + x0;
    for y in y0..y1 {
        for x in x0..x1 {
            let v = plane[y * w + x];
            if v > best {
                best = v;
                at = y * w + x;
            }
        }
    }
    (best, at)
}

fn scatter_argmax<T: Real>(x: &Tensor<T>, idx: &[u32], g: &Tensor<T>) -> Tensor<T> {
    let mut d = Tensor::zeros(x.shape());
    let dd = d.data_mut();
    for (&at, &gv) in idx.iter().zip(g.data()) {
        dd[at as usize] = dd[at as usize] + gv;
    }
    d
}

/// Output width of an SPP layer over `channels` feature maps.
pub fn spp_output_len(levels: usize, channels: usize) -> usize {
    (1..=levels).map(|l| l * l).sum::<usize>() * channels
}

fn spp_forward<T: Real>(x: &Tensor<T>, levels: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = dims4(x, "spp")?;
    if levels == 0 {
        return Err(shape_err("spp needs at least one level"));
    }
    let width = spp_output_len(levels, c);
    let mut out = vec![T::zero(); n * width];
    let mut idx = vec![0u32; n * width];
    for img in 0..n {
        let mut offset = img * width;
        for l in 1..=levels {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let plane = &x.data()[base..base + h * w];
                for bi in 0..l {
                    let (y0, y1) = (bi * h / l, ((bi + 1) * h).div_ceil(l));
                    for bj in 0..l {
                        let (x0, x1) = (bj * w / l, ((bj + 1) * w).div_ceil(l));
                        let (v, at) = window_max(plane, w, y0, y1, x0, x1);
                        out[offset] = v;
                        idx[offset] = (base + at) as u32;
                        offset += 1;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, width], out)?, idx))
}

fn linear_forward<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, inp] = *x.shape() else {
        return Err(shape_err(format!("fully_connected expects [N, in], got {:?}", x.shape())));
    };
    let [out, win] = *wt.shape() else {
        return Err(shape_err("fully_connected weight must be [out, in]"));
    };
    if win != inp || b.len() != out {
        return Err(shape_err(format!(
            "fully_connected: input width {inp}, weight {:?}, bias {}",
            wt.shape(),
            b.len()
        )));
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    T::gemm(
        n,
        inp,
        out,
        T::one(),
        x.data(),
        inp as isize,
        1,
        wt.data(),
        1,
        inp as isize,
        T::one(),
        &mut y,
        out as isize,
        1,
    );
    Tensor::from_vec(&[n, out], y)
}

fn linear_backward<T: Real>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
) -> Result<Triple<T>> {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let out = wt.shape()[0];
    let mut dw = Tensor::zeros(wt.shape());
    T::gemm(
        out,
        n,
        inp,
        T::one(),
        g.data(),
        1,
        out as isize,
        x.data(),
        inp as isize,
        1,
        T::zero(),
        dw.data_mut(),
        inp as isize,
        1,
    );
    let mut db = Tensor::zeros(&[out]);
    for row in g.data().chunks_exact(out) {
        for (d, &v) in db.data_mut().iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    let dx = if want_dx {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            out,
            inp,
            T::one(),
            g.data(),
            out as isize,
            1,
            wt.data(),
            inp as isize,
            1,
            T::zero(),
            dx.data_mut(),
            inp as isize,
            1,
        );
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw, db))
}

fn softmax_xent_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
    let k = *logits
        .shape()
        .last()
        .ok_or_else(|| shape_err("softmax_xent of a scalar"))?;
    let n = logits.len() / k.max(1);
    if n != labels.len() || k == 0 {
        return Err(shape_err(format!("softmax_xent: {n} rows, {} labels", labels.len())));
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        total += (log_z - row[label]).as_f64();
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    Ok((Tensor::scalar(T::from_f64(total / n as f64)), probs))
}

fn concat_forward<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
    let n = first.rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape().len() != 2 || p.shape()[0] != n {
            return Err(shape_err(format!("concat expects [{n}, d], got {:?}", p.shape())));
        }
        widths.push(p.shape()[1]);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::from_vec(&[n, total], data)
}

fn lrn_window(c: usize, channels: usize, size: usize) -> std::ops::Range<usize> {
    let half = size / 2;
    c.saturating_sub(half)..(c + half + 1).min(channels)
}

fn lrn_forward<T: Real>(x: &Tensor<T>, cfg: &LrnConfig) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = dims4(x, "lrn")?;
    let hw = h * w;
    let alpha_n = T::from_f64(cfg.alpha / cfg.size as f64);
    let k = T::from_f64(cfg.k);
    let neg_beta = T::from_f64(-cfg.beta);
    let mut scale = vec![k; x.len()];
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        let base = img * c * hw;
        for ch in 0..c {
            for src in lrn_window(ch, c, cfg.size) {
                for p in 0..hw {
                    let v = x.data()[base + src * hw + p];
                    let s = &mut scale[base + ch * hw + p];
                    *s = *s + alpha_n * v * v;
                }
            }
        }
    }
    for ((o, &v), &s) in out.iter_mut().zip(x.data()).zip(&scale) {
        *o = v * s.powf(neg_beta);
    }
    Ok((Tensor::from_vec(x.shape(), out)?, scale))
}

fn lrn_backward<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    scale: &[T],
    g: &Tensor<T>,
    cfg: &LrnConfig,
) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let neg_beta = T::from_f64(-cfg.beta);
    let coef = T::from_f64(2.0 * cfg.alpha * cfg.beta / cfg.size as f64);
    // ratio = g · y / scale, summed over the windows that contain each channel
    let ratio: Vec<T> = g
        .data()
        .iter()
        .zip(y.data())
        .zip(scale)
        .map(|((&gv, &yv), &s)| gv * yv / s)
        .collect();
    let mut d = vec![T::zero(); x.len()];
    for img in 0..n {
        let base = img * c * hw;
        for ch in 0..c {
            for p in 0..hw {
                let i = base + ch * hw + p;
                d[i] = g.data()[i] * scale[i].powf(neg_beta);
            }
            // channel `ch` feeds the scale of every channel whose window covers it
            for dst in lrn_window(ch, c, cfg.size) {
                for p in 0..hw {
                    let i = base + ch * hw + p;
                    d[i] = d[i] - coef * x.data()[i] * ratio[base + dst * hw + p];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), d).expect("same shape")
}
