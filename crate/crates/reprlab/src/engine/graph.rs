//! Reverse-mode automatic differentiation over an eager expression graph.
//!
//! Nodes are appended to an arena as expressions are built; every node's
//! value is computed immediately. The key property is that `backward`
//! produces *graph nodes*, not bare buffers: each vector-Jacobian product
//! is expressed in terms of the same primitive operations, so gradients
//! are themselves differentiable. The WGAN-GP penalty, which needs
//! d/dphi of ||d D/d x||, falls out of this with no special casing.
//!
//! Argmax and other non-differentiable reductions deliberately do not
//! exist as graph operations (see `Tensor::argmax_row`), so they cannot be
//! differentiated through by construction.

use std::cell::RefCell;
use std::rc::Rc;

use crate::engine::tensor::{
    conv_fwd, conv_grad_input, conv_grad_kernel, matmul, transpose2, ConvGeom, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Conv { x: usize, w: usize, geom: ConvGeom },
    ConvGradInput { gy: usize, w: usize, geom: ConvGeom },
    ConvGradKernel { x: usize, gy: usize, geom: ConvGeom },
    /// Sum over every axis except the first: `[N, ...] -> [N]`.
    RowSum(usize),
    /// Repeat a `[N]` vector across trailing axes: `[N] -> [N, ...]`.
    RowBroadcast(usize),
    /// Sum over every axis except the channel axis (axis 1 of `[N,C,...]`,
    /// or axis 1 of `[N,C]`): `-> [C]`.
    ChanSum(usize),
    /// Repeat a `[C]` vector across batch and spatial axes.
    ChanBroadcast(usize),
    /// Per-row column pick: `[N,A] -> [N]` with one index per row.
    SelectCols(usize, Rc<Vec<usize>>),
    /// Adjoint of `SelectCols`: place `[N]` into columns of zeros `[N,A]`.
    ScatterCols(usize, Rc<Vec<usize>>),
    SumAll(usize),
    /// Repeat a scalar `[1]` over an arbitrary shape.
    BroadcastAll(usize),
    Reshape(usize),
    /// Identity in the forward pass; blocks gradient flow.
    Detach(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Expression graph. Cheap to clone (shared arena).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, value });
        Var { graph: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// A differentiable leaf (parameters).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a].value, &inner.nodes[b].value)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn op_of(&self, id: usize) -> Op {
        self.inner.borrow().nodes[id].op.clone()
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn row_sum(t: &Tensor) -> Tensor {
    let n = t.shape()[0];
    let rest: usize = t.shape()[1..].iter().product::<usize>().max(1);
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = t.data()[i * rest..(i + 1) * rest].iter().sum();
    }
    Tensor::new(vec![n], out)
}

fn row_broadcast(v: &Tensor, shape: &[usize]) -> Tensor {
    let n = shape[0];
    assert_eq!(v.shape(), &[n], "row_broadcast wants [N], got {:?}", v.shape());
    let rest: usize = shape[1..].iter().product::<usize>().max(1);
    let mut out = vec![0.0; n * rest];
    for i in 0..n {
        let val = v.data()[i];
        out[i * rest..(i + 1) * rest].iter_mut().for_each(|o| *o = val);
    }
    Tensor::new(shape.to_vec(), out)
}

fn chan_sum(t: &Tensor) -> Tensor {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let sp: usize = t.shape()[2..].iter().product::<usize>().max(1);
    let mut out = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            out[ch] += t.data()[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out)
}

fn chan_broadcast(v: &Tensor, shape: &[usize]) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(v.shape(), &[c], "chan_broadcast wants [C], got {:?}", v.shape());
    let sp: usize = shape[2..].iter().product::<usize>().max(1);
    let mut out = vec![0.0; n * c * sp];
    for b in 0..n {
        for ch in 0..c {
            let val = v.data()[ch];
            out[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter_mut().for_each(|o| *o = val);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn assert_same_graph(&self, other: &Var) {
        assert!(self.graph.same(&other.graph), "vars belong to different graphs");
    }

    fn binary(&self, other: &Var, op: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.assert_same_graph(other);
        let v = self.graph.with_values(self.id, other.id, |a, b| a.zip(b, f));
        self.graph.push(op(self.id, other.id), v)
    }

    fn unary(&self, op: Op, f: impl FnMut(f64) -> f64) -> Var {
        let v = self.graph.with_value(self.id, |t| t.map(f));
        self.graph.push(op, v)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(self.id, c), |a| c * a)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(self.id, slope), |a| if a > 0.0 { a } else { slope * a })
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.assert_same_graph(other);
        let v = self.graph.with_values(self.id, other.id, matmul);
        self.graph.push(Op::Matmul(self.id, other.id), v)
    }

    pub fn transpose(&self) -> Var {
        let v = self.graph.with_value(self.id, transpose2);
        self.graph.push(Op::Transpose(self.id), v)
    }

    pub fn conv2d(&self, kernel: &Var, geom: ConvGeom) -> Var {
        self.assert_same_graph(kernel);
        let v = self.graph.with_values(self.id, kernel.id, |x, w| conv_fwd(x, w, geom));
        self.graph.push(Op::Conv { x: self.id, w: kernel.id, geom }, v)
    }

    /// Transposed convolution: treats `self` as the output-side gradient of
    /// a convolution with `kernel` and produces the matching input-side
    /// tensor of spatial size `out_hw`.
    pub fn conv2d_transposed(&self, kernel: &Var, geom: ConvGeom, out_hw: (usize, usize)) -> Var {
        self.assert_same_graph(kernel);
        let v = self.graph.with_values(self.id, kernel.id, |gy, w| conv_grad_input(gy, w, geom, out_hw));
        self.graph.push(Op::ConvGradInput { gy: self.id, w: kernel.id, geom }, v)
    }

    fn conv_grad_kernel_node(&self, gy: &Var, geom: ConvGeom, k_hw: (usize, usize)) -> Var {
        self.assert_same_graph(gy);
        let v = self.graph.with_values(self.id, gy.id, |x, g| conv_grad_kernel(x, g, geom, k_hw));
        self.graph.push(Op::ConvGradKernel { x: self.id, gy: gy.id, geom }, v)
    }

    pub fn row_sum(&self) -> Var {
        let v = self.graph.with_value(self.id, row_sum);
        self.graph.push(Op::RowSum(self.id), v)
    }

    pub fn row_broadcast(&self, shape: &[usize]) -> Var {
        let v = self.graph.with_value(self.id, |t| row_broadcast(t, shape));
        self.graph.push(Op::RowBroadcast(self.id), v)
    }

    pub fn chan_sum(&self) -> Var {
        let v = self.graph.with_value(self.id, chan_sum);
        self.graph.push(Op::ChanSum(self.id), v)
    }

    pub fn chan_broadcast(&self, shape: &[usize]) -> Var {
        let v = self.graph.with_value(self.id, |t| chan_broadcast(t, shape));
        self.graph.push(Op::ChanBroadcast(self.id), v)
    }

    /// One column per row: `[N,A] -> [N]`.
    pub fn select_cols(&self, idx: &[usize]) -> Var {
        let value = self.graph.with_value(self.id, |t| {
            let (n, a) = (t.shape()[0], t.shape()[1]);
            assert_eq!(idx.len(), n, "select_cols wants {} indices, got {}", n, idx.len());
            let data = idx
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    assert!(c < a, "column {} out of range {}", c, a);
                    t.data()[i * a + c]
                })
                .collect();
            Tensor::new(vec![n], data)
        });
        let idx = Rc::new(idx.to_vec());
        self.graph.push(Op::SelectCols(self.id, idx), value)
    }

    fn scatter_cols(&self, idx: Rc<Vec<usize>>, ncols: usize) -> Var {
        let value = self.graph.with_value(self.id, |t| {
            let n = t.shape()[0];
            let mut data = vec![0.0; n * ncols];
            for (i, &c) in idx.iter().enumerate() {
                data[i * ncols + c] = t.data()[i];
            }
            Tensor::new(vec![n, ncols], data)
        });
        self.graph.push(Op::ScatterCols(self.id, idx), value)
    }

    pub fn sum_all(&self) -> Var {
        let v = self.graph.with_value(self.id, |t| Tensor::scalar(t.sum()));
        self.graph.push(Op::SumAll(self.id), v)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.graph.with_value(self.id, |t| t.numel()) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn broadcast_all(&self, shape: &[usize]) -> Var {
        let v = self.graph.with_value(self.id, |t| Tensor::full(shape, t.item()));
        self.graph.push(Op::BroadcastAll(self.id), v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.graph.with_value(self.id, |t| t.reshaped(shape.to_vec()));
        self.graph.push(Op::Reshape(self.id), v)
    }

    /// Forward identity that stops gradients. Targets in every loss are
    /// routed through this.
    pub fn detach(&self) -> Var {
        let v = self.value();
        self.graph.push(Op::Detach(self.id), v)
    }

    /// Per-row Euclidean norm of `[N, ...]`, guarded against a zero
    /// gradient of sqrt at exactly zero.
    pub fn row_l2_norm(&self) -> Var {
        self.square().row_sum().add_scalar(1e-24).sqrt()
    }
}

/// Reverse-mode gradient of a scalar `loss` with respect to each entry of
/// `wrt`. The returned vars live on the same graph, so they can be
/// differentiated again. Vars with no path to the loss get zero gradients.
pub fn backward(loss: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
    if loss.value().numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    for v in wrt {
        if !loss.graph.same(&v.graph) {
            return Err(Error::contract("wrt var belongs to a different graph"));
        }
    }
    let g = &loss.graph;

    // Topological order of the ancestors of `loss`.
    let mut order: Vec<usize> = Vec::new();
    let mut seen = vec![false; g.len()];
    let mut stack: Vec<(usize, bool)> = vec![(loss.id, false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            order.push(id);
            continue;
        }
        if seen[id] {
            continue;
        }
        seen[id] = true;
        stack.push((id, true));
        for dep in op_inputs(&g.op_of(id)) {
            if !seen[dep] {
                stack.push((dep, false));
            }
        }
    }

    let mut adjoint: Vec<Option<Var>> = vec![None; g.len()];
    adjoint[loss.id] = Some(g.constant(Tensor::scalar(1.0)));

    let accumulate = |slot: &mut Option<Var>, contrib: Var| {
        *slot = Some(match slot.take() {
            None => contrib,
            Some(prev) => prev.add(&contrib),
        });
    };

    for &id in order.iter().rev() {
        let gy = match adjoint[id].clone() {
            Some(v) => v,
            None => continue,
        };
        let node_var = Var { graph: g.clone(), id };
        match g.op_of(id) {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(&mut adjoint[a], gy.clone());
                accumulate(&mut adjoint[b], gy);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adjoint[a], gy.clone());
                accumulate(&mut adjoint[b], gy.neg());
            }
            Op::Mul(a, b) => {
                let av = Var { graph: g.clone(), id: a };
                let bv = Var { graph: g.clone(), id: b };
                accumulate(&mut adjoint[a], gy.mul(&bv));
                accumulate(&mut adjoint[b], gy.mul(&av));
            }
            Op::Div(a, b) => {
                let bv = Var { graph: g.clone(), id: b };
                accumulate(&mut adjoint[a], gy.div(&bv));
                // d(a/b)/db = -(a/b)/b
                accumulate(&mut adjoint[b], gy.mul(&node_var).div(&bv).neg());
            }
            Op::Neg(a) => accumulate(&mut adjoint[a], gy.neg()),
            Op::Scale(a, c) => accumulate(&mut adjoint[a], gy.scale(c)),
            Op::AddScalar(a) => accumulate(&mut adjoint[a], gy),
            Op::Relu(a) => {
                let mask = g.constant(g.with_value(a, |t| t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })));
                accumulate(&mut adjoint[a], gy.mul(&mask));
            }
            Op::LeakyRelu(a, slope) => {
                let mask = g.constant(g.with_value(a, |t| t.map(|v| if v > 0.0 { 1.0 } else { slope })));
                accumulate(&mut adjoint[a], gy.mul(&mask));
            }
            Op::Tanh(a) => {
                // 1 - tanh^2, expressed through the output node.
                let one_minus = node_var.square().neg().add_scalar(1.0);
                accumulate(&mut adjoint[a], gy.mul(&one_minus));
            }
            Op::Exp(a) => accumulate(&mut adjoint[a], gy.mul(&node_var)),
            Op::Ln(a) => {
                let av = Var { graph: g.clone(), id: a };
                accumulate(&mut adjoint[a], gy.div(&av));
            }
            Op::Sqrt(a) => {
                accumulate(&mut adjoint[a], gy.div(&node_var.scale(2.0)));
            }
            Op::Matmul(a, b) => {
                let av = Var { graph: g.clone(), id: a };
                let bv = Var { graph: g.clone(), id: b };
                accumulate(&mut adjoint[a], gy.matmul(&bv.transpose()));
                accumulate(&mut adjoint[b], av.transpose().matmul(&gy));
            }
            Op::Transpose(a) => accumulate(&mut adjoint[a], gy.transpose()),
            Op::Conv { x, w, geom } => {
                let xv = Var { graph: g.clone(), id: x };
                let wv = Var { graph: g.clone(), id: w };
                let x_hw = {
                    let s = g.shape_of(x);
                    (s[2], s[3])
                };
                let k_hw = {
                    let s = g.shape_of(w);
                    (s[2], s[3])
                };
                accumulate(&mut adjoint[x], gy.conv2d_transposed(&wv, geom, x_hw));
                accumulate(&mut adjoint[w], xv.conv_grad_kernel_node(&gy, geom, k_hw));
            }
            Op::ConvGradInput { gy: gyi, w, geom } => {
                let wv = Var { graph: g.clone(), id: w };
                let gyv = Var { graph: g.clone(), id: gyi };
                let k_hw = {
                    let s = g.shape_of(w);
                    (s[2], s[3])
                };
                // upstream u is input-shaped; d/d(gy) = conv(u, w),
                // d/d(w) = conv_grad_kernel(u, gy).
                accumulate(&mut adjoint[gyi], gy.conv2d(&wv, geom));
                accumulate(&mut adjoint[w], gy.conv_grad_kernel_node(&gyv, geom, k_hw));
            }
            Op::ConvGradKernel { x, gy: gyi, geom } => {
                let xv = Var { graph: g.clone(), id: x };
                let gyv = Var { graph: g.clone(), id: gyi };
                let x_hw = {
                    let s = g.shape_of(x);
                    (s[2], s[3])
                };
                // upstream u is kernel-shaped; d/d(x) = conv_grad_input(gy, u),
                // d/d(gy) = conv(x, u).
                accumulate(&mut adjoint[x], gyv.conv2d_transposed(&gy, geom, x_hw));
                accumulate(&mut adjoint[gyi], xv.conv2d(&gy, geom));
            }
            Op::RowSum(a) => {
                let shape = g.shape_of(a);
                accumulate(&mut adjoint[a], gy.row_broadcast(&shape));
            }
            Op::RowBroadcast(a) => accumulate(&mut adjoint[a], gy.row_sum()),
            Op::ChanSum(a) => {
                let shape = g.shape_of(a);
                accumulate(&mut adjoint[a], gy.chan_broadcast(&shape));
            }
            Op::ChanBroadcast(a) => accumulate(&mut adjoint[a], gy.chan_sum()),
            Op::SelectCols(a, idx) => {
                let ncols = g.shape_of(a)[1];
                accumulate(&mut adjoint[a], gy.scatter_cols(idx, ncols));
            }
            Op::ScatterCols(a, idx) => {
                accumulate(&mut adjoint[a], gy.select_cols(&idx));
            }
            Op::SumAll(a) => {
                let shape = g.shape_of(a);
                accumulate(&mut adjoint[a], gy.broadcast_all(&shape));
            }
            Op::BroadcastAll(a) => accumulate(&mut adjoint[a], gy.sum_all()),
            Op::Reshape(a) => {
                let shape = g.shape_of(a);
                accumulate(&mut adjoint[a], gy.reshape(&shape));
            }
            Op::Detach(_) => {}
        }
    }

    Ok(wrt
        .iter()
        .map(|v| match adjoint[v.id].clone() {
            Some(adj) => adj,
            None => g.constant(Tensor::zeros(&v.shape())),
        })
        .collect())
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b) => vec![*a, *b],
        Op::Conv { x, w, .. } => vec![*x, *w],
        Op::ConvGradInput { gy, w, .. } => vec![*gy, *w],
        Op::ConvGradKernel { x, gy, .. } => vec![*x, *gy],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Transpose(a)
        | Op::RowSum(a)
        | Op::RowBroadcast(a)
        | Op::ChanSum(a)
        | Op::ChanBroadcast(a)
        | Op::SelectCols(a, _)
        | Op::ScatterCols(a, _)
        | Op::SumAll(a)
        | Op::BroadcastAll(a)
        | Op::Reshape(a)
        | Op::Detach(a) => vec![*a],
    }
}
