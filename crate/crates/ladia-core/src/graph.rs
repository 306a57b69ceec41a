//! Reverse-mode automatic differentiation over a flat parameter store.
//!
//! The networks here are small enough that a define-by-run tape over
//! `f64` vectors is both simple and fast: every node is a vector (scalars
//! are length-1 vectors), matrices only ever appear as parameters, and
//! the backward pass walks the tape once, accumulating parameter
//! gradients into a single flat buffer that the optimizer consumes
//! directly.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

/// Handle to one named parameter array in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Name, location and shape of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a matrix parameter (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix parameter; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }
}

/// All trainable parameters, flattened into one contiguous buffer.
///
/// The flat layout keeps the optimizer and gradient clipping trivial and
/// makes checkpoints a plain dump of `(specs, values)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    flat: Vec<f64>,
    specs: Vec<ParamSpec>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter array, filling it from `init`.
    pub fn add(&mut self, name: &str, shape: &[usize], mut init: impl FnMut() -> f64) -> ParamId {
        let offset = self.flat.len();
        let len: usize = shape.iter().product();
        self.flat.extend(core::iter::repeat_with(&mut init).take(len));
        self.specs.push(ParamSpec {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.flat[s.offset..s.offset + s.len()]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (offset, len) = {
            let s = &self.specs[id.0];
            (s.offset, s.len())
        };
        &mut self.flat[offset..offset + len]
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Rebuild a store from checkpointed specs and values.
    pub fn from_parts(specs: Vec<ParamSpec>, flat: Vec<f64>) -> crate::Result<Self> {
        let expected: usize = specs.iter().map(|s| s.len()).sum();
        if expected != flat.len() {
            return Err(crate::Error::Shape(alloc::format!(
                "parameter data has {} values, specs expect {}",
                flat.len(),
                expected
            )));
        }
        Ok(Self { flat, specs })
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Constant input; no gradient flows past it.
    Input,
    /// View of a parameter array as a vector.
    Param(ParamId),
    /// `y = W x` with a matrix parameter `W`.
    MatVec { w: ParamId, x: NodeId },
    /// One row of a matrix parameter (embedding lookup).
    Row { table: ParamId, row: usize },
    /// Elementwise sum of equal-length vectors.
    AddN(Vec<NodeId>),
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Scalar dot product.
    Dot { a: NodeId, b: NodeId },
    /// `y = Σ_i w[i] * xs[i]` with scalar weights from a vector node.
    WeightedSum { w: NodeId, xs: Vec<NodeId> },
    /// Scalar `-logp[target]`; `logp` must hold log-probabilities.
    NllPick { logp: NodeId, target: usize },
    /// Scalar sum of all entries.
    SumVec(NodeId),
}

/// Define-by-run tape. Values are computed eagerly on insertion;
/// [`Graph::backward`] replays the tape in reverse.
pub struct Graph<'a> {
    store: &'a ParamStore,
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Value of a node. Parameter nodes read straight from the store.
    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.ops[id.0] {
            Op::Param(p) => self.store.values(p),
            Op::Row { table, row } => {
                let s = self.store.spec(table);
                let cols = s.cols();
                &self.store.flat[s.offset + row * cols..s.offset + (row + 1) * cols]
            }
            _ => &self.vals[id.0],
        }
    }

    pub fn len(&self, id: NodeId) -> usize {
        self.value(id).len()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.input(vec![v])
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.input(vec![0.0; len])
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        self.push(Op::Param(p), Vec::new())
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> NodeId {
        let spec = self.store.spec(w);
        let (m, n) = (spec.rows(), spec.cols());
        let xv = self.value(x);
        debug_assert_eq!(n, xv.len(), "matvec shape mismatch for {}", spec.name);
        let wv = self.store.values(w);
        let mut y = vec![0.0; m];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *yi = dot(row, xv);
        }
        self.push(Op::MatVec { w, x }, y)
    }

    pub fn row(&mut self, table: ParamId, row: usize) -> NodeId {
        self.push(Op::Row { table, row }, Vec::new())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        let len = self.len(xs[0]);
        let mut y = vec![0.0; len];
        for &x in xs {
            let xv = self.value(x);
            debug_assert_eq!(xv.len(), len);
            for (yi, xi) in y.iter_mut().zip(xv) {
                *yi += xi;
            }
        }
        self.push(Op::AddN(xs.to_vec()), y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, z)| x - z)
            .collect();
        self.push(Op::Sub { a, b }, y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, z)| x * z)
            .collect();
        self.push(Op::Mul { a, b }, y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, y)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut y = Vec::new();
        for &x in xs {
            y.extend_from_slice(self.value(x));
        }
        self.push(Op::Concat(xs.to_vec()), y)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.value(x)[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().map(|&v| fmath::tanh(v)).collect();
        self.push(Op::Tanh(x), y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().map(|&v| fmath::sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), y)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = softmax_vec(self.value(x));
        self.push(Op::Softmax(x), y)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let y = log_softmax_vec(self.value(x));
        self.push(Op::LogSoftmax(x), y)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = dot(self.value(a), self.value(b));
        self.push(Op::Dot { a, b }, vec![y])
    }

    pub fn weighted_sum(&mut self, w: NodeId, xs: &[NodeId]) -> NodeId {
        let wv = self.value(w);
        debug_assert_eq!(wv.len(), xs.len());
        let len = self.len(xs[0]);
        let mut y = vec![0.0; len];
        for (i, &x) in xs.iter().enumerate() {
            let wi = self.value(w)[i];
            debug_assert_eq!(self.len(x), len);
            for (yj, xj) in y.iter_mut().zip(self.value(x)) {
                *yj += wi * xj;
            }
        }
        self.push(
            Op::WeightedSum {
                w,
                xs: xs.to_vec(),
            },
            y,
        )
    }

    /// Negative log-likelihood of `target` under log-probabilities `logp`.
    pub fn nll_pick(&mut self, logp: NodeId, target: usize) -> NodeId {
        let y = -self.value(logp)[target];
        self.push(Op::NllPick { logp, target }, vec![y])
    }

    pub fn sum_vec(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().sum();
        self.push(Op::SumVec(x), vec![y])
    }

    /// Backpropagate from the scalar node `root`, accumulating parameter
    /// gradients into `param_grad` (one slot per scalar in the store).
    pub fn backward(&self, root: NodeId, param_grad: &mut [f64]) {
        debug_assert_eq!(param_grad.len(), self.store.len());
        debug_assert_eq!(self.len(root), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.ops.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(p) => {
                    let s = self.store.spec(*p);
                    for (slot, gi) in param_grad[s.offset..s.offset + s.len()].iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::MatVec { w, x } => {
                    let s = self.store.spec(*w);
                    let (m, n) = (s.rows(), s.cols());
                    let xv = self.value(*x);
                    // dW[i][j] += g[i] * x[j]
                    for (gi, chunk) in g
                        .iter()
                        .zip(param_grad[s.offset..s.offset + m * n].chunks_mut(n))
                    {
                        for (slot, xj) in chunk.iter_mut().zip(xv) {
                            *slot += gi * xj;
                        }
                    }
                    // dx[j] += Σ_i W[i][j] * g[i]
                    let wv = self.store.values(*w);
                    let gx = acc(&mut grads, *x, n);
                    for (gi, row) in g.iter().zip(wv.chunks(n)) {
                        for (slot, wij) in gx.iter_mut().zip(row) {
                            *slot += gi * wij;
                        }
                    }
                }
                Op::Row { table, row } => {
                    let s = self.store.spec(*table);
                    let cols = s.cols();
                    let base = s.offset + row * cols;
                    for (slot, gi) in param_grad[base..base + cols].iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        let gx = acc(&mut grads, x, g.len());
                        for (slot, gi) in gx.iter_mut().zip(&g) {
                            *slot += gi;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (slot, gi) in ga.iter_mut().zip(&g) {
                        *slot += gi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for (slot, gi) in gb.iter_mut().zip(&g) {
                        *slot -= gi;
                    }
                }
                Op::Mul { a, b } => {
                    let bv = self.value(*b).to_vec();
                    let av = self.value(*a).to_vec();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((slot, gi), bi) in ga.iter_mut().zip(&g).zip(&bv) {
                        *slot += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((slot, gi), ai) in gb.iter_mut().zip(&g).zip(&av) {
                        *slot += gi * ai;
                    }
                }
                Op::Scale { x, c } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (slot, gi) in gx.iter_mut().zip(&g) {
                        *slot += gi * c;
                    }
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let len = self.len(x);
                        let gx = acc(&mut grads, x, len);
                        for (slot, gi) in gx.iter_mut().zip(&g[start..start + len]) {
                            *slot += gi;
                        }
                        start += len;
                    }
                }
                Op::Slice { x, start } => {
                    let len = self.len(*x);
                    let gx = acc(&mut grads, *x, len);
                    for (slot, gi) in gx[*start..*start + g.len()].iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::Tanh(x) => {
                    let y = self.vals[i].clone();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((slot, gi), yi) in gx.iter_mut().zip(&g).zip(&y) {
                        *slot += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.vals[i].clone();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((slot, gi), yi) in gx.iter_mut().zip(&g).zip(&y) {
                        *slot += gi * yi * (1.0 - yi);
                    }
                }
                Op::Softmax(x) => {
                    let s = self.vals[i].clone();
                    let gs = dot(&g, &s);
                    let gx = acc(&mut grads, *x, g.len());
                    for ((slot, gi), si) in gx.iter_mut().zip(&g).zip(&s) {
                        *slot += si * (gi - gs);
                    }
                }
                Op::LogSoftmax(x) => {
                    // d/dx_j = g_j - softmax(x)_j * Σ g
                    let gsum: f64 = g.iter().sum();
                    let y = self.vals[i].clone();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((slot, gi), yi) in gx.iter_mut().zip(&g).zip(&y) {
                        *slot += gi - fmath::exp(*yi) * gsum;
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = g[0];
                    let bv = self.value(*b).to_vec();
                    let av = self.value(*a).to_vec();
                    let ga = acc(&mut grads, *a, av.len());
                    for (slot, bi) in ga.iter_mut().zip(&bv) {
                        *slot += g0 * bi;
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for (slot, ai) in gb.iter_mut().zip(&av) {
                        *slot += g0 * ai;
                    }
                }
                Op::WeightedSum { w, xs } => {
                    let wv = self.value(*w).to_vec();
                    let mut gw = vec![0.0; xs.len()];
                    for (k, &x) in xs.iter().enumerate() {
                        gw[k] = dot(&g, self.value(x));
                    }
                    {
                        let slot = acc(&mut grads, *w, wv.len());
                        for (s, gi) in slot.iter_mut().zip(&gw) {
                            *s += gi;
                        }
                    }
                    for (k, &x) in xs.iter().enumerate() {
                        let gx = acc(&mut grads, x, g.len());
                        for (slot, gi) in gx.iter_mut().zip(&g) {
                            *slot += wv[k] * gi;
                        }
                    }
                }
                Op::NllPick { logp, target } => {
                    let len = self.len(*logp);
                    let gx = acc(&mut grads, *logp, len);
                    gx[*target] -= g[0];
                }
                Op::SumVec(x) => {
                    let len = self.len(*x);
                    let gx = acc(&mut grads, *x, len);
                    for slot in gx.iter_mut() {
                        *slot += g[0];
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = x.iter().map(|&v| fmath::exp(v - max)).collect();
    let z: f64 = y.iter().sum();
    for v in y.iter_mut() {
        *v /= z;
    }
    y
}

/// Numerically stable log-softmax of a plain slice.
pub fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| fmath::exp(v - max)).sum();
    let lse = max + fmath::ln(z);
    x.iter().map(|&v| v - lse).collect()
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
