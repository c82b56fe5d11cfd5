//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! always row-major matrices: a batch of `B` vectors of width `k` is a
//! `B x k` matrix and scalars are `1 x 1`. Nodes that do not depend on a
//! parameter are treated as constants and skipped during the backward pass,
//! which is how detached trajectories stay out of the gradient.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);
static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable tensor. Clones of a model share ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var {
    index: usize,
    graph: u64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddScalar(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Square(usize),
    Silu(usize),
    Tanh(usize),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    /// Row-wise scalar function with a precomputed Jacobian (one row per batch element).
    RowScalar(usize, Matrix),
    /// Weighted sum of squared pairwise column differences, `sum_{n<m} w[n,m] (g_n - g_m)^2 / norm`.
    PairwiseSq { input: usize, weights: Matrix, norm: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter recorded in a graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Result<&Matrix> {
        self.by_param
            .get(&id)
            .ok_or_else(|| Error::Gradient(format!("parameter {id:?} was not recorded in the graph")))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.by_param.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.by_param.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { index: self.nodes.len() - 1, graph: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.check(v)].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Registers a parameter; repeated registration of the same id returns the same node.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&index) = self.params.get(&id) {
            return Var { index, graph: self.id };
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v.index);
        v
    }

    /// Copies the value of `v` into a new constant node.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = self.nodes[ia].value.dot(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::MatMul(ia, ib), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(self.nodes[ia].value.dim(), self.nodes[ib].value.dim());
        let value = &self.nodes[ia].value + &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Add(ia, ib), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(self.nodes[ia].value.dim(), self.nodes[ib].value.dim());
        let value = &self.nodes[ia].value - &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Sub(ia, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(self.nodes[ia].value.dim(), self.nodes[ib].value.dim());
        let value = &self.nodes[ia].value * &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Mul(ia, ib), rg)
    }

    /// `[B,k] + [1,k]` with the row broadcast over the batch.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.check(a), self.check(row));
        assert_eq!(self.nodes[ir].value.nrows(), 1);
        assert_eq!(self.nodes[ia].value.ncols(), self.nodes[ir].value.ncols());
        let value = &self.nodes[ia].value + &self.nodes[ir].value;
        let rg = self.rg(ia) || self.rg(ir);
        self.push(value, Op::AddRow(ia, ir), rg)
    }

    /// `[B,k] * [1,k]` elementwise with the row broadcast over the batch.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.check(a), self.check(row));
        assert_eq!(self.nodes[ir].value.nrows(), 1);
        assert_eq!(self.nodes[ia].value.ncols(), self.nodes[ir].value.ncols());
        let value = &self.nodes[ia].value * &self.nodes[ir].value;
        let rg = self.rg(ia) || self.rg(ir);
        self.push(value, Op::MulRow(ia, ir), rg)
    }

    /// `[B,k] + [1,1]`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.check(a), self.check(s));
        assert_eq!(self.nodes[is].value.dim(), (1, 1));
        let value = &self.nodes[ia].value + self.nodes[is].value[[0, 0]];
        let rg = self.rg(ia) || self.rg(is);
        self.push(value, Op::AddScalar(ia, is), rg)
    }

    /// `[B,k] * [B,1]` with the column broadcast across features.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ia, ic) = (self.check(a), self.check(col));
        assert_eq!(self.nodes[ic].value.ncols(), 1);
        assert_eq!(self.nodes[ia].value.nrows(), self.nodes[ic].value.nrows());
        let value = &self.nodes[ia].value * &self.nodes[ic].value;
        let rg = self.rg(ia) || self.rg(ic);
        self.push(value, Op::MulCol(ia, ic), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.check(a);
        let value = &self.nodes[ia].value * c;
        let rg = self.rg(ia);
        self.push(value, Op::Scale(ia, c), rg)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let ia = self.check(a);
        let value = &self.nodes[ia].value + c;
        let rg = self.rg(ia);
        self.push(value, Op::Shift(ia), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.mapv(|v| v * v);
        let rg = self.rg(ia);
        self.push(value, Op::Square(ia), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.mapv(|v| v * sigmoid(v));
        let rg = self.rg(ia);
        self.push(value, Op::Silu(ia), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.mapv(f64::tanh);
        let rg = self.rg(ia);
        self.push(value, Op::Tanh(ia), rg)
    }

    /// Row sums: `[B,k] -> [B,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(ia);
        self.push(value, Op::SumCols(ia), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = Array2::from_elem((1, 1), self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        self.push(value, Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let n = self.nodes[ia].value.len() as f64;
        let value = Array2::from_elem((1, 1), self.nodes[ia].value.sum() / n);
        let rg = self.rg(ia);
        self.push(value, Op::Mean(ia), rg)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let views: Vec<_> = idx.iter().map(|&i| self.nodes[i].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(value, Op::Concat(idx), rg)
    }

    /// Records `f(x_b)` per row given its values `[B,1]` and gradients `[B,d]`.
    pub fn row_scalar(&mut self, x: Var, values: Matrix, jacobian: Matrix) -> Var {
        let ix = self.check(x);
        assert_eq!(values.dim(), (self.nodes[ix].value.nrows(), 1));
        assert_eq!(jacobian.dim(), self.nodes[ix].value.dim());
        let rg = self.rg(ix);
        self.push(values, Op::RowScalar(ix, jacobian), rg)
    }

    /// `sum_b sum_{n<m} w[n,m] (g[b,n] - g[b,m])^2 / norm` as a `1 x 1` node.
    pub fn pairwise_sq(&mut self, g: Var, weights: Matrix, norm: f64) -> Var {
        let ig = self.check(g);
        let cols = self.nodes[ig].value.ncols();
        assert_eq!(weights.dim(), (cols, cols));
        let gv = &self.nodes[ig].value;
        let mut total = 0.0;
        for row in gv.rows() {
            for n in 0..cols {
                for m in (n + 1)..cols {
                    let w = weights[[n, m]];
                    if w != 0.0 {
                        let d = row[n] - row[m];
                        total += w * d * d;
                    }
                }
            }
        }
        let value = Array2::from_elem((1, 1), total / norm);
        let rg = self.rg(ig);
        self.push(value, Op::PairwiseSq { input: ig, weights, norm }, rg)
    }

    /// Reverse pass from a scalar node. Every registered parameter receives a
    /// gradient entry, zero when it does not influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id {
            return Err(Error::Gradient("loss variable was recorded in a different graph".into()));
        }
        let root = loss.index;
        if self.nodes[root].value.dim() != (1, 1) {
            return Err(Error::Gradient(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[root].value.dim()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Array2::ones((1, 1)));

        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(up);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let g = up.dot(&self.nodes[*b].value.t());
                        accumulate(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = self.nodes[*a].value.t().dot(&up);
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, up.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, up);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, up.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -up);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &up * &self.nodes[*b].value);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &up * &self.nodes[*a].value);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        accumulate(&mut grads, *r, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, up);
                    }
                }
                Op::MulRow(a, r) => {
                    if self.rg(*r) {
                        let g = (&up * &self.nodes[*a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *r, g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &up * &self.nodes[*r].value);
                    }
                }
                Op::AddScalar(a, s) => {
                    if self.rg(*s) {
                        accumulate(&mut grads, *s, Array2::from_elem((1, 1), up.sum()));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, up);
                    }
                }
                Op::MulCol(a, c) => {
                    if self.rg(*c) {
                        let g = (&up * &self.nodes[*a].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *c, g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &up * &self.nodes[*c].value);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, up * *c),
                Op::Shift(a) => accumulate(&mut grads, *a, up),
                Op::Square(a) => {
                    let g = &up * &self.nodes[*a].value * 2.0;
                    accumulate(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let mut g = self.nodes[*a].value.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    g *= &up;
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    g *= &up;
                    accumulate(&mut grads, *a, g);
                }
                Op::SumCols(a) => {
                    let cols = self.nodes[*a].value.ncols();
                    let g = up.broadcast((up.nrows(), cols)).expect("column broadcast").to_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(self.nodes[*a].value.dim(), up[[0, 0]]);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let g = Array2::from_elem(self.nodes[*a].value.dim(), up[[0, 0]] / n);
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.rg(p) {
                            let g = up.slice(ndarray::s![.., start..start + w]).to_owned();
                            accumulate(&mut grads, p, g);
                        }
                        start += w;
                    }
                }
                Op::RowScalar(x, jac) => {
                    accumulate(&mut grads, *x, jac * &up);
                }
                Op::PairwiseSq { input, weights, norm } => {
                    let gv = &self.nodes[*input].value;
                    let cols = gv.ncols();
                    let factor = 2.0 * up[[0, 0]] / norm;
                    let mut g = Array2::zeros(gv.dim());
                    for (b, row) in gv.rows().into_iter().enumerate() {
                        for n in 0..cols {
                            for m in (n + 1)..cols {
                                let w = weights[[n, m]];
                                if w != 0.0 {
                                    let d = factor * w * (row[n] - row[m]);
                                    g[[b, n]] += d;
                                    g[[b, m]] -= d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
            }
        }

        let by_param = self
            .params
            .iter()
            .map(|(&id, &idx)| {
                let g = grads[..]
                    .get(idx)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array2::zeros(self.nodes[idx].value.dim()));
                (id, g)
            })
            .collect();
        Ok(Gradients { by_param })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    /// Checks d(loss)/d(param) for a unary graph builder against central differences.
    fn check_primitive<F>(shape: (usize, usize), seed: u64, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, shape.0, shape.1);
        // Random projection so the scalar depends on every output entry.
        let id = ParamId::fresh();
        let eval = |x: &Matrix| -> (f64, Option<Matrix>) {
            let mut g = Graph::new();
            let p = g.param(id, x);
            let out = build(&mut g, p);
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let proj = random(&mut prng, g.value(out).nrows(), g.value(out).ncols());
            let c = g.constant(proj);
            let prod = g.mul(out, c);
            let s = g.sum(prod);
            let grads = g.backward(s).unwrap();
            (g.scalar(s), Some(grads.get(id).unwrap().clone()))
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-6, "entry ({r},{c}): analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let other = array![[0.3, -0.7, 1.1], [0.2, 0.5, -0.4]];
        check_primitive((2, 3), 1, |g, x| {
            let w = g.constant(array![[0.5, -1.0], [2.0, 0.1], [-0.3, 0.7]]);
            g.matmul(x, w)
        });
        check_primitive((3, 2), 2, |g, x| {
            let a = g.constant(array![[0.5, -1.0, 0.4], [2.0, 0.1, 0.3]]);
            g.matmul(a, x)
        });
        let o = other.clone();
        check_primitive((2, 3), 3, move |g, x| {
            let c = g.constant(o.clone());
            g.add(x, c)
        });
        let o = other.clone();
        check_primitive((2, 3), 4, move |g, x| {
            let c = g.constant(o.clone());
            g.sub(c, x)
        });
        let o = other.clone();
        check_primitive((2, 3), 5, move |g, x| {
            let c = g.constant(o.clone());
            g.mul(x, c)
        });
        check_primitive((1, 3), 6, |g, r| {
            let a = g.constant(array![[0.5, -1.0, 0.4], [2.0, 0.1, 0.3]]);
            g.add_row(a, r)
        });
        check_primitive((1, 3), 7, |g, r| {
            let a = g.constant(array![[0.5, -1.0, 0.4], [2.0, 0.1, 0.3]]);
            g.mul_row(a, r)
        });
        check_primitive((2, 3), 8, |g, x| {
            let r = g.constant(array![[0.5, -1.0, 0.4]]);
            g.mul_row(x, r)
        });
        check_primitive((1, 1), 9, |g, s| {
            let a = g.constant(array![[0.5, -1.0], [2.0, 0.1]]);
            g.add_scalar(a, s)
        });
        check_primitive((2, 1), 10, |g, c| {
            let a = g.constant(array![[0.5, -1.0], [2.0, 0.1]]);
            g.mul_col(a, c)
        });
        check_primitive((2, 3), 11, |g, x| g.scale(x, -2.5));
        check_primitive((2, 3), 12, |g, x| g.shift(x, 4.0));
        check_primitive((2, 3), 13, |g, x| g.square(x));
        check_primitive((2, 3), 14, |g, x| g.silu(x));
        check_primitive((2, 3), 15, |g, x| g.tanh(x));
        check_primitive((2, 3), 16, |g, x| g.sum_cols(x));
        check_primitive((2, 3), 17, |g, x| g.sum(x));
        check_primitive((2, 3), 18, |g, x| g.mean(x));
        check_primitive((2, 3), 19, |g, x| {
            let c = g.constant(array![[1.0], [2.0]]);
            let sq = g.square(x);
            g.concat_cols(&[c, x, sq])
        });
        check_primitive((3, 2), 20, |g, x| {
            // f(x) = sum(x^3) per row with its analytic jacobian.
            let v = g.value(x).clone();
            let vals = v.mapv(|a| a * a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let jac = v.mapv(|a| 3.0 * a * a);
            g.row_scalar(x, vals, jac)
        });
        check_primitive((3, 4), 21, |g, x| {
            let mut w = Array2::zeros((4, 4));
            for n in 0..4 {
                for m in (n + 1)..4 {
                    w[[n, m]] = 1.0 + (n + 2 * m) as f64 * 0.1;
                }
            }
            g.pairwise_sq(x, w, 7.0)
        });
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let theta = array![[1.0, -2.0, 0.5]];
        let id = ParamId::fresh();
        let mut g = Graph::new();
        let p = g.param(id, &theta);
        let sq = g.square(p);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap(), &theta);
    }

    #[test]
    fn detached_paths_contribute_nothing() {
        let id = ParamId::fresh();
        let mut g = Graph::new();
        let p = g.param(id, &array![[2.0]]);
        let sq = g.square(p);
        let frozen = g.stop_gradient(sq);
        let loss = g.add(frozen, p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_roots() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        assert!(g.backward(a).is_err());
        let mut other = Graph::new();
        let b = other.constant_scalar(1.0);
        assert!(g.backward(b).is_err());
        let grads = other.backward(b).unwrap();
        assert!(grads.get(ParamId::fresh()).is_err());
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let (ia, ib) = (ParamId::fresh(), ParamId::fresh());
        let mut g = Graph::new();
        let a = g.param(ia, &array![[3.0]]);
        let _b = g.param(ib, &array![[1.0, 1.0]]);
        let loss = g.square(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ia).unwrap()[[0, 0]], 6.0);
        assert_eq!(grads.get(ib).unwrap(), &array![[0.0, 0.0]]);
    }
}
