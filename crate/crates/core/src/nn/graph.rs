//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns the gradient of that scalar with respect to every parameter
//! that took part in the computation.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Point3;

use super::{Matrix, ParamId, ParamStore};
use crate::cloud::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Fixed neighbor lists in compressed-row form; every row lists itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighborhood {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    /// Ball neighborhoods of the given radius (the point itself included).
    pub fn from_radius(coords: &[Point3<f64>], radius: f64) -> Self {
        if coords.is_empty() {
            return Self::from_lists(Vec::new());
        }
        let index = SpatialIndex::build(coords, radius).expect("non-empty coords, positive radius");
        let mut offsets = Vec::with_capacity(coords.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for p in coords {
            let start = indices.len();
            index.for_each_within(p, radius, |i| indices.push(i));
            indices[start..].sort_unstable();
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total_edges(&self) -> usize {
        self.indices.len()
    }
}

/// How column standardization guards small variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StdMode {
    /// `(x - mean) / sqrt(var + eps)`
    Additive(f64),
    /// `(x - mean) / sqrt(max(var, eps))`; exact unit variance whenever `var >= eps`.
    Floor(f64),
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulTn(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    NeighborMean(NodeId, Arc<Neighborhood>),
    Standardize {
        input: NodeId,
        inv_std: Vec<f64>,
        clamped: Vec<bool>,
    },
    ScaleShift(NodeId, NodeId, NodeId),
    GatherRows(NodeId, Arc<Vec<usize>>),
    VibLoss(NodeId, f64),
    CrossEntropy(NodeId, Arc<Vec<(usize, usize)>>),
    OffsetReg(NodeId, Arc<Vec<(usize, [f64; 3])>>),
    OffsetDir(NodeId, Arc<Vec<(usize, [f64; 3])>>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros when the parameter did not take part.
    pub fn get_or_zeros(&self, id: ParamId, params: &ParamStore) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let p = params.get(id);
            Matrix::zeros(p.rows(), p.cols())
        })
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::frobenius_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

const NORM_EPS: f64 = 1e-8;

/// Loss, diagonal term and off-diagonal term of the viewpoint-bottleneck
/// objective `Σᵢ(1−Zᵢᵢ)² + λ·Σᵢ Σ_{j≠i} Zᵢⱼ²`.
pub fn vib_terms(z: &Matrix, lambda: f64) -> (f64, f64, f64) {
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            let v = z[(i, j)];
            if i == j {
                diag += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    (diag + lambda * off, diag, off)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax_row(logits.row(r)));
    }
    out
}

fn fnv(hash: &mut u64, bit: bool) {
    *hash ^= bit as u64 + 1;
    *hash = hash.wrapping_mul(0x0100_0000_01b3);
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    kink: u64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            kink: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken during the forward pass (ReLU
    /// masks, variance floors, norm guards). Two passes with equal
    /// signatures evaluate the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_tn(self.value(b));
        self.push(v, Op::MatMulTn(a, b))
    }

    /// Adds a `1 x N` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!((1, self.value(a).cols()), b.shape(), "bias shape");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let mut h = self.kink;
        for x in v.data_mut() {
            let on = *x > 0.0;
            fnv(&mut h, on);
            if !on {
                *x = 0.0;
            }
        }
        self.kink = h;
        self.push(v, Op::Relu(a))
    }

    /// Row `i` of the output is the mean of the rows listed in `nb.neighbors(i)`.
    pub fn neighbor_mean(&mut self, a: NodeId, nb: Arc<Neighborhood>) -> NodeId {
        let x = self.value(a);
        assert_eq!(nb.len(), x.rows(), "neighborhood size");
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let list = nb.neighbors(i);
            let w = 1.0 / list.len() as f64;
            let out = v.row_mut(i);
            for &j in list {
                for (o, s) in out.iter_mut().zip(x.row(j)) {
                    *o += s;
                }
            }
            for o in out.iter_mut() {
                *o *= w;
            }
        }
        self.push(v, Op::NeighborMean(a, nb))
    }

    /// Per-column standardization over the rows.
    pub fn standardize(&mut self, a: NodeId, mode: StdMode) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / m as f64).collect();
        let mut var = vec![0.0; n];
        for r in 0..m {
            for (c, v) in x.row(r).iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
        let mut inv_std = vec![0.0; n];
        let mut clamped = vec![false; n];
        let mut h = self.kink;
        for c in 0..n {
            let var_c = var[c] / m as f64;
            inv_std[c] = match mode {
                StdMode::Additive(eps) => 1.0 / (var_c + eps).sqrt(),
                StdMode::Floor(eps) => {
                    clamped[c] = var_c < eps;
                    fnv(&mut h, clamped[c]);
                    1.0 / var_c.max(eps).sqrt()
                }
            };
        }
        let mut v = Matrix::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                v[(r, c)] = (x[(r, c)] - mean[c]) * inv_std[c];
            }
        }
        self.kink = h;
        self.push(
            v,
            Op::Standardize {
                input: a,
                inv_std,
                clamped,
            },
        )
    }

    /// `a * gamma + beta` with `1 x N` per-column gamma and beta.
    pub fn scale_shift(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let g = self.value(gamma).clone();
        let b = self.value(beta).clone();
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (c, x) in v.row_mut(r).iter_mut().enumerate() {
                *x = *x * g.data()[c] + b.data()[c];
            }
        }
        self.push(v, Op::ScaleShift(a, gamma, beta))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let v = self.value(a).select_rows(&idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Viewpoint-bottleneck loss of a square correlation matrix.
    pub fn vib_loss(&mut self, z: NodeId, lambda: f64) -> NodeId {
        let (loss, _, _) = vib_terms(self.value(z), lambda);
        self.push(Matrix::scalar(loss), Op::VibLoss(z, lambda))
    }

    /// Softmax cross-entropy averaged over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<(usize, usize)>>) -> NodeId {
        assert!(!targets.is_empty(), "cross entropy needs targets");
        let x = self.value(logits);
        let mut total = 0.0;
        for &(r, c) in targets.iter() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        let loss = total / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, targets))
    }

    /// Mean Euclidean distance between predicted offsets and target displacements.
    pub fn offset_reg(&mut self, offsets: NodeId, targets: Arc<Vec<(usize, [f64; 3])>>) -> NodeId {
        assert!(!targets.is_empty(), "offset loss needs targets");
        let o = self.value(offsets);
        let mut total = 0.0;
        let mut h = self.kink;
        for (r, t) in targets.iter() {
            let row = o.row(*r);
            let d = ((row[0] - t[0]).powi(2) + (row[1] - t[1]).powi(2) + (row[2] - t[2]).powi(2)).sqrt();
            fnv(&mut h, d < NORM_EPS);
            total += d;
        }
        self.kink = h;
        let loss = total / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::OffsetReg(offsets, targets))
    }

    /// Negative mean cosine between predicted offsets and target displacements;
    /// both norms are floored at `1e-8`.
    pub fn offset_dir(&mut self, offsets: NodeId, targets: Arc<Vec<(usize, [f64; 3])>>) -> NodeId {
        assert!(!targets.is_empty(), "offset loss needs targets");
        let o = self.value(offsets);
        let mut total = 0.0;
        let mut h = self.kink;
        for (r, t) in targets.iter() {
            let row = o.row(*r);
            let on = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            fnv(&mut h, on < NORM_EPS);
            let dot = row[0] * t[0] + row[1] * t[1] + row[2] * t[2];
            total += dot / (on.max(NORM_EPS) * tn.max(NORM_EPS));
        }
        self.kink = h;
        let loss = -total / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::OffsetDir(offsets, targets))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.grads[pid.0] = Some(dy),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, dy.matmul_nt(bv));
                    acc(&mut grads, *b, av.matmul_tn(&dy));
                }
                Op::MatMulTn(a, b) => {
                    // y = aᵀ b ; da = b dyᵀ ; db = a dy
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, bv.matmul_nt(&dy));
                    acc(&mut grads, *b, av.matmul(&dy));
                }
                Op::AddBias(a, bias) => {
                    let sums = dy.column_sums();
                    acc(&mut grads, *bias, Matrix::from_vec(1, sums.len(), sums));
                    acc(&mut grads, *a, dy);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => {
                    let mut g = dy;
                    g.scale(*s);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = dy;
                    for (gv, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::NeighborMean(a, nb) => {
                    let mut g = Matrix::zeros(dy.rows(), dy.cols());
                    for i in 0..dy.rows() {
                        let list = nb.neighbors(i);
                        let w = 1.0 / list.len() as f64;
                        let src: Vec<f64> = dy.row(i).iter().map(|v| v * w).collect();
                        for &j in list {
                            for (o, s) in g.row_mut(j).iter_mut().zip(&src) {
                                *o += s;
                            }
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Standardize {
                    input,
                    inv_std,
                    clamped,
                } => {
                    let xhat = &node.value;
                    let (m, n) = dy.shape();
                    let mf = m as f64;
                    let sum_dy = dy.column_sums();
                    let mut sum_dy_x = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            sum_dy_x[c] += dy[(r, c)] * xhat[(r, c)];
                        }
                    }
                    let mut g = Matrix::zeros(m, n);
                    for r in 0..m {
                        for c in 0..n {
                            let s = inv_std[c];
                            g[(r, c)] = if clamped[c] {
                                s * (dy[(r, c)] - sum_dy[c] / mf)
                            } else {
                                s * (dy[(r, c)] - sum_dy[c] / mf - xhat[(r, c)] * sum_dy_x[c] / mf)
                            };
                        }
                    }
                    acc(&mut grads, *input, g);
                }
                Op::ScaleShift(a, gamma, beta) => {
                    let av = self.value(*a);
                    let gv = self.value(*gamma);
                    let n = dy.cols();
                    let mut dg = vec![0.0; n];
                    let mut da = dy.clone();
                    for r in 0..dy.rows() {
                        for c in 0..n {
                            dg[c] += dy[(r, c)] * av[(r, c)];
                            da[(r, c)] *= gv.data()[c];
                        }
                    }
                    let db = dy.column_sums();
                    acc(&mut grads, *gamma, Matrix::from_vec(1, n, dg));
                    acc(&mut grads, *beta, Matrix::from_vec(1, n, db));
                    acc(&mut grads, *a, da);
                }
                Op::GatherRows(a, idx_list) => {
                    let src = self.value(*a);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in idx_list.iter().enumerate() {
                        for (o, s) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *o += s;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::VibLoss(z, lambda) => {
                    let zv = self.value(*z);
                    let up = dy[(0, 0)];
                    let mut g = Matrix::zeros(zv.rows(), zv.cols());
                    for i in 0..zv.rows() {
                        for j in 0..zv.cols() {
                            let v = zv[(i, j)];
                            g[(i, j)] = up * if i == j { -2.0 * (1.0 - v) } else { 2.0 * lambda * v };
                        }
                    }
                    acc(&mut grads, *z, g);
                }
                Op::CrossEntropy(logits, targets) => {
                    let x = self.value(*logits);
                    let up = dy[(0, 0)] / targets.len() as f64;
                    let mut g = Matrix::zeros(x.rows(), x.cols());
                    for &(r, c) in targets.iter() {
                        let p = softmax_row(x.row(r));
                        for (k, pk) in p.into_iter().enumerate() {
                            g[(r, k)] += up * (pk - if k == c { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::OffsetReg(offsets, targets) => {
                    let o = self.value(*offsets);
                    let up = dy[(0, 0)] / targets.len() as f64;
                    let mut g = Matrix::zeros(o.rows(), o.cols());
                    for (r, t) in targets.iter() {
                        let row = o.row(*r);
                        let d = [row[0] - t[0], row[1] - t[1], row[2] - t[2]];
                        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if norm < NORM_EPS {
                            continue;
                        }
                        for k in 0..3 {
                            g[(*r, k)] += up * d[k] / norm;
                        }
                    }
                    acc(&mut grads, *offsets, g);
                }
                Op::OffsetDir(offsets, targets) => {
                    let o = self.value(*offsets);
                    let up = -dy[(0, 0)] / targets.len() as f64;
                    let mut g = Matrix::zeros(o.rows(), o.cols());
                    for (r, t) in targets.iter() {
                        let row = o.row(*r);
                        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(NORM_EPS);
                        let u = [t[0] / tn, t[1] / tn, t[2] / tn];
                        let on = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                        if on < NORM_EPS {
                            for k in 0..3 {
                                g[(*r, k)] += up * u[k] / NORM_EPS;
                            }
                            continue;
                        }
                        let cos = (row[0] * u[0] + row[1] * u[1] + row[2] * u[2]) / on;
                        for k in 0..3 {
                            g[(*r, k)] += up * (u[k] - cos * row[k] / on) / on;
                        }
                    }
                    acc(&mut grads, *offsets, g);
                }
            }
        }
        out
    }
}
