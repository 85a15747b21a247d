//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended to the tape in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. A node fed to
//! several consumers receives the sum of their contributions.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::params::ParameterStore;
use crate::error::{Result, StpsError};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    BroadcastAdd(NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Relu(NodeId),
    Dropout { input: NodeId, mask: Vec<T> },
    Gather { bank: NodeId, indices: Vec<usize> },
    WeightedGather { bank: NodeId, weights: NodeId, indices: Vec<usize> },
    Reshape(NodeId),
    Sum(NodeId),
    MeanAbsError { input: NodeId, target: Tensor<T> },
}

/// A shaped array on the tape with an optional gradient slot.
#[derive(Debug)]
pub struct DiffNode<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

impl<T: Scalar> DiffNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Computation tape. Dropout is active only when the graph was created
/// with [`Graph::training`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<DiffNode<T>>,
    params: BTreeMap<String, NodeId>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Returns the dropout generator so its state can be carried to the next graph.
    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &DiffNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store` as a trainable leaf. Binding the
    /// same name twice returns the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .value(name)
            .ok_or_else(|| StpsError::UnknownParameter(name.to_string()))?
            .clone();
        let id = self.variable(value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Names of every parameter bound on this graph, in lexicographic order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let layout = MatmulLayout::new(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); layout.batch * layout.p * layout.r];
        layout.forward(av, bv, &mut out);
        let value = Tensor::new(layout.out_shape.clone(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose_last()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(StpsError::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a + b` with `b` broadcast against the trailing axes of `a`
    /// (each aligned axis of `b` equals that of `a` or is 1).
    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let map = BroadcastMap::new(self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        let out = value.data_mut();
        match map.tile {
            Some(t) if t > 0 => {
                for chunk in out.chunks_mut(t) {
                    chunk.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
                }
            }
            _ => map.for_each(|i, j| out[i] = out[i] + bv[j]),
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BroadcastAdd(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        if !s.is_finite() {
            return Err(StpsError::invalid(format!("scale factor {s} is not finite")));
        }
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| StpsError::shape("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(StpsError::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (x, y))| k == axis || x == y);
            if !ok {
                return Err(StpsError::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| StpsError::shape("concat_features", "no parts"))?;
        let axis = self.shape(*first).len().saturating_sub(1);
        self.concat(parts, axis)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(StpsError::invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(a);
        };
        let keep = T::of(1.0 / (1.0 - rate));
        // An element is dropped when a uniform u32 falls below rate·2³².
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut value = self.nodes[a.0].value.clone();
        let mut mask = Vec::with_capacity(value.len());
        for v in value.data_mut() {
            let m = if u64::from(rng.next_u32()) < threshold { T::zero() } else { keep };
            *v = *v * m;
            mask.push(m);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { input: a, mask }, rg))
    }

    /// Row gather from `bank` (first axis). Backward scatter-adds.
    pub fn embedding_lookup(&mut self, bank: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = self.value(bank).select_rows(indices).map_err(|e| match e {
            StpsError::Bounds { index, bound, .. } => StpsError::Bounds {
                what: "embedding bank",
                index,
                bound,
            },
            other => other,
        })?;
        let rg = self.rg(bank);
        Ok(self.push(
            value,
            Op::Gather {
                bank,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = Σ_t w[t] · bank[indices[r·L + t]]` for a bank `[n, d]`
    /// and weights with `L` entries; output `[R, d]`. Equivalent to a
    /// gather followed by a contraction over `t`, without materialising
    /// the `[R, L, d]` intermediate.
    pub fn weighted_gather(&mut self, bank: NodeId, weights: NodeId, indices: &[usize]) -> Result<NodeId> {
        let bs = self.shape(bank).to_vec();
        let l = self.value(weights).len();
        if bs.len() != 2 || l == 0 || indices.len() % l != 0 {
            return Err(StpsError::shape(
                "weighted_gather",
                format!("bank {bs:?}, {l} weights, {} indices", indices.len()),
            ));
        }
        let (n, d) = (bs[0], bs[1]);
        if let Some(&bad) = indices.iter().find(|&&k| k >= n) {
            return Err(StpsError::Bounds {
                what: "embedding bank",
                index: bad,
                bound: n,
            });
        }
        let rows = indices.len() / l;
        let bv = self.value(bank).data();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for (t, &w) in wv.iter().enumerate() {
                let k = indices[r * l + t];
                for (o, &b) in dst.iter_mut().zip(&bv[k * d..(k + 1) * d]) {
                    *o = *o + w * b;
                }
            }
        }
        let rg = self.rg(bank) || self.rg(weights);
        Ok(self.push(
            Tensor::new([rows, d], out)?,
            Op::WeightedGather {
                bank,
                weights,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `mean |a − target|`. The subgradient at exact ties is 0.
    pub fn mean_abs_error(&mut self, a: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        if self.shape(a) != target.shape() {
            return Err(StpsError::shape(
                "mean_abs_error",
                format!("{:?} vs {:?}", self.shape(a), target.shape()),
            ));
        }
        let n = T::of(target.len().max(1) as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t).abs())
            .sum();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::MeanAbsError {
                input: a,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// node that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(StpsError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.shape(loss).to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.add_assign(&contribution),
            None => node.grad = Some(contribution),
        }
    }

    /// Runs `f` on the (possibly fresh) gradient buffer of `id` with read
    /// access to the rest of the tape.
    fn accumulate_with(&mut self, id: NodeId, f: impl FnOnce(&mut [T], &Self)) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut g = match self.nodes[id.0].grad.take() {
            Some(g) => g,
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        };
        f(g.data_mut(), self);
        self.nodes[id.0].grad = Some(g);
    }

    fn propagate(&mut self, i: usize, grad: &Tensor<T>) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(&op, i, grad);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, op: &Op<T>, i: usize, grad: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let layout = MatmulLayout::new(self.shape(a), self.shape(b))?;
                self.accumulate_with(a, |ga, g| {
                    layout.grad_a(grad.data(), g.value(b).data(), ga)
                });
                self.accumulate_with(b, |gb, g| {
                    layout.grad_b(g.value(a).data(), grad.data(), gb)
                });
            }
            Op::Transpose(a) => {
                let g = grad.transpose_last()?;
                self.accumulate(*a, g);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, grad.clone());
            }
            Op::BroadcastAdd(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone());
                let map = BroadcastMap::new(self.shape(a), self.shape(b))?;
                self.accumulate_with(b, |gb, _| {
                    let gd = grad.data();
                    match map.tile {
                        Some(t) if t > 0 => {
                            for chunk in gd.chunks(t) {
                                gb.iter_mut().zip(chunk).for_each(|(o, &g)| *o = *o + g);
                            }
                        }
                        _ => map.for_each(|k, j| gb[j] = gb[j] + gd[k]),
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, grad.map(|g| g * s));
            }
            Op::Offset(a) => self.accumulate(*a, grad.clone()),
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis] * inner;
                    self.accumulate_with(p, |gp, _| {
                        for o in 0..outer {
                            let src = &grad.data()[o * total + start..o * total + start + width];
                            for (d, &s) in gp[o * width..(o + 1) * width].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    });
                    start += width;
                }
            }
            Op::Relu(a) => {
                self.accumulate_with(*a, |ga, tape| {
                    let out = tape.nodes[i].value.data();
                    for ((d, &g), &y) in ga.iter_mut().zip(grad.data()).zip(out) {
                        if y > T::zero() {
                            *d = *d + g;
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                let g = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                )?;
                self.accumulate(*input, g);
            }
            Op::Gather { bank, indices } => {
                let bank = *bank;
                let width = grad.len() / indices.len().max(1);
                self.accumulate_with(bank, |gb, _| {
                    for (row, &k) in indices.iter().enumerate() {
                        let src = &grad.data()[row * width..(row + 1) * width];
                        for (d, &s) in gb[k * width..(k + 1) * width].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::WeightedGather { bank, weights, indices } => {
                let (bank, weights) = (*bank, *weights);
                let d = self.shape(bank)[1];
                let l = self.value(weights).len();
                let rows = indices.len() / l;
                self.accumulate_with(bank, |gb, tape| {
                    let wv = tape.value(weights).data();
                    for r in 0..rows {
                        let src = &grad.data()[r * d..(r + 1) * d];
                        for (t, &w) in wv.iter().enumerate() {
                            let k = indices[r * l + t];
                            for (o, &g) in gb[k * d..(k + 1) * d].iter_mut().zip(src) {
                                *o = *o + w * g;
                            }
                        }
                    }
                });
                self.accumulate_with(weights, |gw, tape| {
                    let bv = tape.value(bank).data();
                    for r in 0..rows {
                        let src = &grad.data()[r * d..(r + 1) * d];
                        for (t, o) in gw.iter_mut().enumerate() {
                            let k = indices[r * l + t];
                            let dot: T = src.iter().zip(&bv[k * d..(k + 1) * d]).map(|(&g, &b)| g * b).sum();
                            *o = *o + dot;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, grad.clone().reshaped(shape)?);
            }
            Op::Sum(a) => {
                let g = grad.data()[0];
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::full(shape, g));
            }
            Op::MeanAbsError { input, target } => {
                let input = *input;
                let scale = grad.data()[0] / T::of(target.len().max(1) as f64);
                self.accumulate_with(input, |ga, tape| {
                    let x = tape.value(input).data();
                    for ((d, &xv), &t) in ga.iter_mut().zip(x).zip(target.data()) {
                        let diff = xv - t;
                        if diff > T::zero() {
                            *d = *d + scale;
                        } else if diff < T::zero() {
                            *d = *d - scale;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Index mapping for a right-aligned broadcast of `b` onto `a`.
struct BroadcastMap {
    /// Fast path: `b` equals the trailing axes of `a` exactly.
    tile: Option<usize>,
    a_shape: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || StpsError::shape("broadcast_add", format!("{b:?} does not broadcast to {a:?}"));
        if b.len() > a.len() {
            return Err(err());
        }
        let off = a.len() - b.len();
        let mut b_strides = vec![0; a.len()];
        let mut stride = 1;
        for k in (0..b.len()).rev() {
            let (da, db) = (a[off + k], b[k]);
            if db == da {
                b_strides[off + k] = if db == 1 { 0 } else { stride };
            } else if db != 1 {
                return Err(err());
            }
            stride *= db;
        }
        let tile = (a[off..] == *b).then(|| b.iter().product());
        Ok(Self {
            tile,
            a_shape: a.to_vec(),
            b_strides,
        })
    }

    /// Calls `f(i, j)` for every flat index `i` of `a` with its source `j` in `b`.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.a_shape.iter().product();
        if total == 0 {
            return;
        }
        if let Some(t) = self.tile {
            for base in (0..total).step_by(t.max(1)) {
                for j in 0..t {
                    f(base + j, j);
                }
            }
            return;
        }
        let rank = self.a_shape.len();
        let mut idx = vec![0; rank];
        let mut j = 0;
        for i in 0..total {
            f(i, j);
            for k in (0..rank).rev() {
                idx[k] += 1;
                j += self.b_strides[k];
                if idx[k] < self.a_shape[k] {
                    break;
                }
                j -= self.b_strides[k] * self.a_shape[k];
                idx[k] = 0;
            }
        }
    }
}

/// Shapes for a (possibly batched) matrix product.
#[derive(Clone, Debug)]
struct MatmulLayout {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    p: usize,
    q: usize,
    r: usize,
    out_shape: Vec<usize>,
}

impl MatmulLayout {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = |why: &str| {
            StpsError::shape("matmul", format!("{why}: {sa:?} x {sb:?}"))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err("operands must have rank >= 2"));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(err("inner dimensions differ"));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead = if lead_a.is_empty() {
            lead_b
        } else if lead_b.is_empty() || lead_a == lead_b {
            lead_a
        } else {
            return Err(err("batch dimensions differ"));
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend([p, r]);
        Ok(Self {
            batch: lead.iter().product(),
            a_batched: !lead_a.is_empty(),
            b_batched: !lead_b.is_empty(),
            p,
            q,
            r,
            out_shape,
        })
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.p * self.q
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.q * self.r
        } else {
            0
        }
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (p, q, r) = (self.p, self.q, self.r);
        if self.a_batched && !self.b_batched {
            let rows = self.batch * p;
            T::gemm(
                MatRef::row_major(a, rows, q),
                MatRef::row_major(b, q, r),
                T::zero(),
                out,
            );
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                MatRef::row_major(&a[self.a_off(i)..self.a_off(i) + p * q], p, q),
                MatRef::row_major(&b[self.b_off(i)..self.b_off(i) + q * r], q, r),
                T::zero(),
                &mut out[i * p * r..(i + 1) * p * r],
            );
        }
    }

    /// `ga += g · bᵀ`, summed over the batch when `a` is unbatched.
    fn grad_a<T: Scalar>(&self, g: &[T], b: &[T], ga: &mut [T]) {
        let (p, q, r) = (self.p, self.q, self.r);
        if self.a_batched && !self.b_batched {
            T::gemm(
                MatRef::row_major(g, self.batch * p, r),
                MatRef::transposed(b, q, r),
                T::one(),
                ga,
            );
            return;
        }
        for i in 0..self.batch {
            let off = self.a_off(i);
            T::gemm(
                MatRef::row_major(&g[i * p * r..(i + 1) * p * r], p, r),
                MatRef::transposed(&b[self.b_off(i)..self.b_off(i) + q * r], q, r),
                T::one(),
                &mut ga[off..off + p * q],
            );
        }
    }

    /// `gb += aᵀ · g`, summed over the batch when `b` is unbatched.
    fn grad_b<T: Scalar>(&self, a: &[T], g: &[T], gb: &mut [T]) {
        let (p, q, r) = (self.p, self.q, self.r);
        if self.a_batched && !self.b_batched {
            T::gemm(
                MatRef::transposed(a, self.batch * p, q),
                MatRef::row_major(g, self.batch * p, r),
                T::one(),
                gb,
            );
            return;
        }
        for i in 0..self.batch {
            let off = self.b_off(i);
            T::gemm(
                MatRef::transposed(&a[self.a_off(i)..self.a_off(i) + p * q], p, q),
                MatRef::row_major(&g[i * p * r..(i + 1) * p * r], p, r),
                T::one(),
                &mut gb[off..off + q * r],
            );
        }
    }
}
