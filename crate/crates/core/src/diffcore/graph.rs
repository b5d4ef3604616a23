use std::cell::RefCell;

use super::tensor::{broadcast_shape, zip_broadcast, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Powf(usize, f64),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    Mean(usize),
    /// Reduction by max; stores the flat input index chosen for every output element.
    Max(usize, Vec<usize>),
    /// Elementwise choice between two same-shape operands.
    Select(usize, usize, Vec<bool>),
    Transpose(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager reverse-mode tape. Values are computed as nodes are recorded, so
/// insertion order is a topological order of the expression graph.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op, self.needs(a))
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            zip_broadcast(name, &nodes[a].value, &nodes[b].value, f)?
        };
        Ok(self.push(value, op, self.needs(a) || self.needs(b)))
    }

    /// Reverse pass from a scalar root. Every call starts from zeroed
    /// gradients; nodes the root does not depend on report zeros.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape();
        if root_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(upstream);
                continue;
            }
            let value = &node.value;
            let val = |i: usize| &nodes[i].value;
            let mut send = |i: usize, g: Tensor| {
                if !nodes[i].needs_grad {
                    return;
                }
                let g = g.reduce_to(nodes[i].value.shape());
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Add(a, b) => {
                    send(a, upstream.clone());
                    send(b, upstream);
                }
                &Op::Sub(a, b) => {
                    send(a, upstream.clone());
                    send(b, upstream.map(|v| -v));
                }
                &Op::Mul(a, b) => {
                    if nodes[a].needs_grad {
                        send(a, zip_broadcast("mul", &upstream, val(b), |g, y| g * y)?);
                    }
                    if nodes[b].needs_grad {
                        send(b, zip_broadcast("mul", &upstream, val(a), |g, x| g * x)?);
                    }
                }
                &Op::Div(a, b) => {
                    if nodes[a].needs_grad {
                        send(a, zip_broadcast("div", &upstream, val(b), |g, y| g / y)?);
                    }
                    if nodes[b].needs_grad {
                        // d(x/y)/dy = -(x/y)/y
                        let q = zip_broadcast("div", value, val(b), |q, y| -q / y)?;
                        send(b, zip_broadcast("div", &upstream, &q, |g, d| g * d)?);
                    }
                }
                &Op::MatMul(a, b) => {
                    if nodes[a].needs_grad {
                        send(a, upstream.matmul(&val(b).transpose())?);
                    }
                    if nodes[b].needs_grad {
                        send(b, val(a).transpose().matmul(&upstream)?);
                    }
                }
                &Op::Neg(a) => send(a, upstream.map(|g| -g)),
                &Op::Scale(a, c) => send(a, upstream.map(|g| g * c)),
                &Op::Shift(a) => send(a, upstream),
                &Op::Exp(a) => send(a, mul_same(&upstream, value, |g, y| g * y)),
                &Op::Log(a) => send(a, mul_same(&upstream, val(a), |g, x| g / x)),
                &Op::Tanh(a) => send(a, mul_same(&upstream, value, |g, y| g * (1.0 - y * y))),
                &Op::Sigmoid(a) => send(a, mul_same(&upstream, value, |g, y| g * y * (1.0 - y))),
                &Op::Powf(a, p) => send(
                    a,
                    mul_same(&upstream, val(a), |g, x| g * p * x.powf(p - 1.0)),
                ),
                &Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    send(a, Tensor::full(r, c, upstream.item()));
                }
                &Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    send(a, Tensor::full(r, c, upstream.item() / (r * c) as f64));
                }
                &Op::RowSums(a) => {
                    let (r, c) = val(a).shape();
                    let mut g = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            g.set(rr, cc, upstream.get(rr, 0));
                        }
                    }
                    send(a, g);
                }
                &Op::ColSums(a) => {
                    let (r, c) = val(a).shape();
                    let mut g = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            g.set(rr, cc, upstream.get(0, cc));
                        }
                    }
                    send(a, g);
                }
                Op::Max(a, argmax) => {
                    let (r, c) = val(*a).shape();
                    let mut g = Tensor::zeros(r, c);
                    for (k, &flat) in argmax.iter().enumerate() {
                        g.data_mut()[flat] += upstream.data()[k];
                    }
                    send(*a, g);
                }
                Op::Select(a, b, cond) => {
                    let (r, c) = upstream.shape();
                    let mut ga = Tensor::zeros(r, c);
                    let mut gb = Tensor::zeros(r, c);
                    for (k, &take_a) in cond.iter().enumerate() {
                        if take_a {
                            ga.data_mut()[k] = upstream.data()[k];
                        } else {
                            gb.data_mut()[k] = upstream.data()[k];
                        }
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                &Op::Transpose(a) => send(a, upstream.transpose()),
            }
        }
        Ok(Gradients { grads })
    }
}

fn mul_same(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

/// Gradients of one backward pass, indexed by the recorded nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// ∂root/∂var; zeros when `var` is unreachable from the root.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Forward value of the expression rooted here.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands recorded on different graphs"
        );
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        self.graph
            .binary("add", self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| {
                a + b
            })
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        self.graph
            .binary("sub", self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| {
                a - b
            })
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        self.graph
            .binary("mul", self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| {
                a * b
            })
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        self.graph
            .binary("div", self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| {
                a / b
            })
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        let g = self.graph;
        let value = {
            let nodes = g.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        Ok(g.push(
            value,
            Op::MatMul(self.id, rhs.id),
            g.needs(self.id) || g.needs(rhs.id),
        ))
    }

    pub fn neg(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Neg(self.id), |t| t.map(|v| -v))
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Scale(self.id, c), |t| t.map(|v| v * c))
    }

    /// Addition of a constant.
    pub fn shift(self, c: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Shift(self.id), |t| t.map(|v| v + c))
    }

    pub fn exp(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn log(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Powf(self.id, p), |t| t.map(|v| v.powf(p)))
    }

    pub fn sum(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Mean(self.id), |t| {
            Tensor::scalar(t.sum() / t.len() as f64)
        })
    }

    /// Sum of each row, `r×c → r×1`.
    pub fn row_sums(self) -> Var<'g> {
        self.graph.unary(self.id, Op::RowSums(self.id), |t| {
            Tensor::column(
                (0..t.rows())
                    .map(|r| t.data()[r * t.cols()..(r + 1) * t.cols()].iter().sum())
                    .collect(),
            )
        })
    }

    /// Sum of each column, `r×c → 1×c`.
    pub fn col_sums(self) -> Var<'g> {
        self.graph.unary(self.id, Op::ColSums(self.id), |t| {
            let mut out = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += t.get(r, c);
                }
            }
            Tensor::row(out)
        })
    }

    /// Largest element, `r×c → 1×1`. Ties resolve to the first index.
    pub fn max(self) -> Var<'g> {
        let g = self.graph;
        let (value, arg) = {
            let nodes = g.nodes.borrow();
            let t = &nodes[self.id].value;
            let arg = argmax(t.data());
            (Tensor::scalar(t.data()[arg]), arg)
        };
        g.push(value, Op::Max(self.id, vec![arg]), g.needs(self.id))
    }

    /// Largest element of each row, `r×c → r×1`.
    pub fn row_max(self) -> Var<'g> {
        let g = self.graph;
        let (value, args) = {
            let nodes = g.nodes.borrow();
            let t = &nodes[self.id].value;
            let c = t.cols();
            let args: Vec<usize> = (0..t.rows())
                .map(|r| r * c + argmax(&t.data()[r * c..(r + 1) * c]))
                .collect();
            let vals = args.iter().map(|&i| t.data()[i]).collect();
            (Tensor::column(vals), args)
        };
        g.push(value, Op::Max(self.id, args), g.needs(self.id))
    }

    /// Elementwise `if cond { self } else { other }`; all three share one shape.
    pub fn select(self, cond: &[bool], other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let g = self.graph;
        let value = {
            let nodes = g.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "select",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            if cond.len() != a.len() {
                return Err(Error::Shape {
                    op: "select mask",
                    lhs: a.shape(),
                    rhs: (cond.len(), 1),
                });
            }
            let data = cond
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&c, (&x, &y))| if c { x } else { y })
                .collect();
            Tensor::from_vec(a.rows(), a.cols(), data)?
        };
        Ok(g.push(
            value,
            Op::Select(self.id, other.id, cond.to_vec()),
            g.needs(self.id) || g.needs(other.id),
        ))
    }

    /// Keeps elements where `mask` is true and zeroes the rest.
    pub fn mask(self, mask: &[bool]) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        let zeros = self.graph.constant(Tensor::zeros(r, c));
        self.select(mask, zeros)
    }

    pub fn transpose(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Transpose(self.id), Tensor::transpose)
    }

    /// Shape check without recording anything.
    pub fn broadcasts_with(&self, other: &Var<'g>) -> bool {
        broadcast_shape(self.shape(), other.shape()).is_some()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
