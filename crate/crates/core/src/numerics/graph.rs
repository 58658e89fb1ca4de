//! Reverse-mode gradient tape over a fixed set of tensor primitives.
//!
//! A [`Graph`] records every value it computes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates adjoints for the nodes that depend on a trainable leaf.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Tape of recorded tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    no_grad: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose parameter leaves are all treated as constants.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter from `store`. Repeated bindings of the same
    /// name return the same leaf, so a graph must only bind from one store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let tracked = p.trainable && !self.no_grad;
        let v = self.push(p.value.clone(), Op::Leaf, tracked);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`, the natural form of a dense layer with `[out, in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::MatMulNt(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    /// Adds a bias row `b` (shape `[m]` or `[1, m]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let m = av.cols();
        if bv.len() != m {
            return Err(Error::config(format!("bias of {} values for {m} columns", bv.len())));
        }
        let mut out = av.clone();
        let bias = bv.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::AddRow(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, s), t)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let t = self.tracked(a);
        self.push(v, op, t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let t = self.tracked(a);
        self.push(v, Op::Mean(a), t)
    }

    /// Sums each row of a rank-2 tensor into shape `[rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let data = (0..n).map(|i| av.row(i).iter().sum()).collect();
        let v = Tensor::new(vec![n, 1], data).expect("row_sum shape");
        let t = self.tracked(a);
        self.push(v, Op::RowSum(a), t)
    }

    /// First node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    /// Reverse sweep from the scalar node `root`; returns adjoints of every
    /// tracked parameter leaf, keyed by parameter name.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::config("backward root must be a scalar"));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let y = &node.value;
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.tracked(a) {
                        let da = g.matmul_nt(self.value(b))?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if self.tracked(b) {
                        let db = self.value(a).matmul_tn(&g)?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.tracked(a) {
                        let da = g.matmul(self.value(b))?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if self.tracked(b) {
                        let db = g.matmul_tn(self.value(a))?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(a) {
                        accumulate(&mut adj, a, g.clone())?;
                    }
                    if self.tracked(b) {
                        accumulate(&mut adj, b, g)?;
                    }
                }
                Op::AddRow(a, b) => {
                    if self.tracked(b) {
                        let m = g.cols();
                        let mut db = vec![0.0; m];
                        for r in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        let db = Tensor::new(self.value(b).shape().to_vec(), db)?;
                        accumulate(&mut adj, b, db)?;
                    }
                    if self.tracked(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(b) {
                        accumulate(&mut adj, b, g.scale(-1.0))?;
                    }
                    if self.tracked(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(a) {
                        accumulate(&mut adj, a, g.mul(self.value(b))?)?;
                    }
                    if self.tracked(b) {
                        accumulate(&mut adj, b, g.mul(self.value(a))?)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, g.scale(s))?,
                Op::Sigmoid(a) => {
                    let d = g.zip_map(y, |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(a), |g, x| g / x)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Exp(a) => {
                    let d = g.zip_map(y, |g, e| g * e)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), |g, x| 2.0 * g * x)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(a), |g, x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(a), |g, x| g * sigmoid(x))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Sum(a) => {
                    let d = Tensor::full(self.value(a).shape(), g.item());
                    accumulate(&mut adj, a, d)?;
                }
                Op::Mean(a) => {
                    let n = self.value(a).len() as f64;
                    let d = Tensor::full(self.value(a).shape(), g.item() / n);
                    accumulate(&mut adj, a, d)?;
                }
                Op::RowSum(a) => {
                    let av = self.value(a);
                    let m = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    for r in 0..av.rows() {
                        let gr = g.data()[r];
                        d.row_mut(r).iter_mut().take(m).for_each(|v| *v = gr);
                    }
                    accumulate(&mut adj, a, d)?;
                }
            }
        }

        let mut grads = Gradients::default();
        for (name, &v) in &self.params {
            if let Some(g) = adj[v.0].take() {
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1e6) >= 0.0 && sigmoid(1e6) == 1.0);
        assert!((softplus(1e6) - 1e6).abs() < 1e-9);
        assert!(softplus(-1e6) >= 0.0 && softplus(-1e6) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_node_is_located() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(-1.0));
        let b = g.exp(a);
        let l = g.log(a);
        let _ = g.add(b, l).unwrap();
        assert_eq!(g.first_non_finite(), Some((2, "log")));
    }
}
