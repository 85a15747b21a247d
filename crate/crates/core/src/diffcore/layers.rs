//! Affine maps and the two-layer residual block used by every MLP.
//!
//! Layers act pointwise over the last axis (kernel-size-1 convolutions), so
//! any number of leading batch/location axes is accepted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::params::{xavier_uniform, ParameterStore};
use crate::error::{Result, StpsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x·W + b` along the last axis of `x`.
pub fn affine<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let (xs, ws, bs) = (g.shape(x), g.shape(w), g.shape(b));
    if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
        return Err(StpsError::shape(
            "affine",
            format!("x {xs:?}, W {ws:?}, b {bs:?}"),
        ));
    }
    let xw = g.matmul_last(x, w)?;
    g.broadcast_add(xw, b)
}

impl<T: Scalar> Graph<T> {
    /// Product over the last axis for inputs of any rank ≥ 1.
    pub(crate) fn matmul_last(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() >= 2 {
            return self.matmul(x, w);
        }
        let row = self.reshape(x, vec![1, xs[0]])?;
        let out = self.matmul(row, w)?;
        let q = self.shape(out)[1];
        self.reshape(out, vec![q])
    }
}

/// Dimensions and parameter names of a residual block
/// `layer2(dropout(relu(layer1(x)))) + skip(x)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ResidualBlock {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
            output,
        }
    }

    /// Learned skip projection is needed only when the width changes.
    pub fn has_skip(&self) -> bool {
        self.input != self.output
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    /// Names of every parameter the block owns.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            self.name("fc1.b"),
            self.name("fc1.w"),
            self.name("fc2.b"),
            self.name("fc2.w"),
        ];
        if self.has_skip() {
            names.push(self.name("skip.b"));
            names.push(self.name("skip.w"));
        }
        names
    }

    /// Registers freshly initialised parameters in `store`.
    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (p, h, q) = (self.input, self.hidden, self.output);
        store.insert(self.name("fc1.w"), xavier_uniform(&[p, h], p, h, rng))?;
        store.insert(self.name("fc1.b"), Tensor::zeros([h]))?;
        store.insert(self.name("fc2.w"), xavier_uniform(&[h, q], h, q, rng))?;
        store.insert(self.name("fc2.b"), Tensor::zeros([q]))?;
        if self.has_skip() {
            store.insert(self.name("skip.w"), xavier_uniform(&[p, q], p, q, rng))?;
            store.insert(self.name("skip.b"), Tensor::zeros([q]))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: NodeId,
        dropout: f64,
    ) -> Result<NodeId> {
        if g.shape(x).last() != Some(&self.input) {
            return Err(StpsError::shape(
                "residual_block",
                format!("{} expects width {}, got {:?}", self.prefix, self.input, g.shape(x)),
            ));
        }
        let w1 = g.param(store, &self.name("fc1.w"))?;
        let b1 = g.param(store, &self.name("fc1.b"))?;
        let w2 = g.param(store, &self.name("fc2.w"))?;
        let b2 = g.param(store, &self.name("fc2.b"))?;
        let h = affine(g, x, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        let out = affine(g, h, w2, b2)?;
        let skip = if self.has_skip() {
            let ws = g.param(store, &self.name("skip.w"))?;
            let bs = g.param(store, &self.name("skip.b"))?;
            affine(g, x, ws, bs)?
        } else {
            x
        };
        g.add(out, skip)
    }
}
