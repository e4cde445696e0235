use rand::Rng;

use super::backbone::{lookup, BN_EPS};
use super::graph::{Graph, NodeId, StdMode};
use super::{Matrix, ParamId, ParamStore};

/// `D -> D -> n` MLP producing per-point class scores.
#[derive(Debug, Clone)]
pub struct SemanticHead {
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl SemanticHead {
    pub fn init(dim: usize, classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            hidden_w: store.add_he("semantic.hidden.weight", dim, dim, rng),
            hidden_b: store.add("semantic.hidden.bias", Matrix::zeros(1, dim)),
            out_w: store.add("semantic.out.weight", Matrix::zeros(dim, classes)),
            out_b: store.add("semantic.out.bias", Matrix::zeros(1, classes)),
        }
    }

    pub fn bind(dim: usize, classes: usize, store: &ParamStore) -> crate::Result<Self> {
        Ok(Self {
            hidden_w: lookup(store, "semantic.hidden.weight", (dim, dim))?,
            hidden_b: lookup(store, "semantic.hidden.bias", (1, dim))?,
            out_w: lookup(store, "semantic.out.weight", (dim, classes))?,
            out_b: lookup(store, "semantic.out.bias", (1, classes))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, features: NodeId) -> NodeId {
        let w = g.param(self.hidden_w);
        let b = g.param(self.hidden_b);
        let h = g.matmul(features, w);
        let h = g.add_bias(h, b);
        let h = g.relu(h);
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let s = g.matmul(h, w);
        g.add_bias(s, b)
    }
}

/// `D -> D` (standardize, ReLU) `-> 3` offset regressor; the output is
/// multiplied by a fixed scale in mm.
#[derive(Debug, Clone)]
pub struct OffsetHead {
    hidden_w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    scale: f64,
}

impl OffsetHead {
    pub fn init(dim: usize, scale: f64, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            hidden_w: store.add_he("offset.hidden.weight", dim, dim, rng),
            gamma: store.add("offset.hidden.gamma", Matrix::filled(1, dim, 1.0)),
            beta: store.add("offset.hidden.beta", Matrix::zeros(1, dim)),
            out_w: store.add_normal("offset.out.weight", dim, 3, (1.0 / dim as f64).sqrt(), rng),
            out_b: store.add("offset.out.bias", Matrix::zeros(1, 3)),
            scale,
        }
    }

    pub fn bind(dim: usize, scale: f64, store: &ParamStore) -> crate::Result<Self> {
        Ok(Self {
            hidden_w: lookup(store, "offset.hidden.weight", (dim, dim))?,
            gamma: lookup(store, "offset.hidden.gamma", (1, dim))?,
            beta: lookup(store, "offset.hidden.beta", (1, dim))?,
            out_w: lookup(store, "offset.out.weight", (dim, 3))?,
            out_b: lookup(store, "offset.out.bias", (1, 3))?,
            scale,
        })
    }

    pub fn forward(&self, g: &mut Graph, features: NodeId) -> NodeId {
        let w = g.param(self.hidden_w);
        let h = g.matmul(features, w);
        let h = g.standardize(h, StdMode::Additive(BN_EPS));
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let h = g.scale_shift(h, gamma, beta);
        let h = g.relu(h);
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let o = g.matmul(h, w);
        let o = g.add_bias(o, b);
        g.scale(o, self.scale)
    }
}
