//! Reverse-mode autodiff on a single-threaded tape.
//!
//! A [`Tape`] owns an append-only arena of nodes; [`Var`] is an index into it.
//! Forward ops execute eagerly and record what backward needs. `backward`
//! walks the arena in reverse, accumulating gradients in deterministic order:
//! identical tapes produce bit-identical gradients.
//!
//! Leaves are either parameters (gradients accumulated) or constants
//! (gradients skipped, which also skips the work of computing them).

use std::cell::RefCell;

use super::tensor::{
    batched_matmul3, binary_broadcast, broadcast_to, concat, matmul2, matmul2_acc,
    reduce_to_shape, slice_axis, slice_backward_acc, sum_axes, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    BatchedMatmul(Var, Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Asin(Var),
    Sqrt(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxes { input: Var, axes: Vec<usize>, keep: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    BroadcastTo(Var),
    /// Elementwise select: `mask * a + (1 - mask) * b`. The mask is a plain
    /// (detached) tensor; gradients are routed, never taken through the mask.
    WhereMask { mask: Tensor, a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Register a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-trainable leaf; no gradient work is spent on it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Clone of the forward value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.numel(), 1);
        nodes[v.0].value.data()[0]
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn unary<F>(&self, a: Var, op: Op, f: F) -> Var
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary_bcast(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            binary_broadcast(&nodes[a.0].value, &nodes[b.0].value, f)
                .map_err(|e| rename_shape_err(e, name))?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    /// Elementwise division with IEEE semantics for zero denominators.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            matmul2(&nodes[a.0].value, &nodes[b.0].value, false, false)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn batched_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            batched_matmul3(&nodes[a.0].value, &nodes[b.0].value)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BatchedMatmul(a, b), needs))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |t| t.map(f64::exp))
    }

    /// Natural log. Signals a domain error on any non-positive element.
    pub fn ln(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(bad) = nodes[a.0].value.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::domain("ln", format!("non-positive input {}", bad)));
            }
        }
        Ok(self.unary(a, Op::Ln(a), |t| t.map(f64::ln)))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |t| t.map(sigmoid_stable))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |t| t.map(softplus_stable))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |t| t.map(|x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |t| t.map(f64::tanh))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |t| t.map(f64::sin))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), |t| t.map(f64::cos))
    }

    /// Arcsine. Signals a domain error outside [-1, 1].
    pub fn asin(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(bad) = nodes[a.0].value.data().iter().find(|&&x| !(-1.0..=1.0).contains(&x)) {
                return Err(Error::domain("asin", format!("input {} outside [-1, 1]", bad)));
            }
        }
        Ok(self.unary(a, Op::Asin(a), |t| t.map(f64::asin)))
    }

    /// Square root. Signals a domain error on any non-positive element.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(bad) = nodes[a.0].value.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::domain("sqrt", format!("non-positive input {}", bad)));
            }
        }
        Ok(self.unary(a, Op::Sqrt(a), |t| t.map(f64::sqrt)))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |t| t.map(|x| x * x))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |t| t.map(|x| -x))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |t| t.map(|x| c * x))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |t| t.map(|x| x + c))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data().iter().sum())
        };
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        };
        let needs = self.needs(a);
        self.push(value, Op::MeanAll(a), needs)
    }

    pub fn sum_axes(&self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            sum_axes(&nodes[a.0].value, axes, keep)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::SumAxes { input: a, axes: axes.to_vec(), keep }, needs))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            concat(&refs, axis)?
        };
        let needs = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Concat { inputs: parts.to_vec(), axis }, needs))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            slice_axis(&nodes[a.0].value, axis, start, end)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, needs))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.reshaped(shape.to_vec())?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_to(&nodes[a.0].value, shape)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::BroadcastTo(a), needs))
    }

    /// Elementwise select by a detached 0/1 mask: `a` where the mask is
    /// nonzero, else `b`. A true select, so non-finite values on the
    /// unselected side never leak through (unlike mask multiplication).
    pub fn where_mask(&self, mask: &Tensor, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let sel = binary_broadcast(mask, va, |m, x| if m != 0.0 { x } else { 0.0 })?;
            let other = binary_broadcast(mask, vb, |m, x| if m == 0.0 { x } else { 0.0 })?;
            binary_broadcast(&sel, &other, |x, y| x + y)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::WhereMask { mask: mask.clone(), a, b }, needs))
    }

    /// Detached elementwise comparison of two forward values, as a 0/1 mask
    /// broadcast to the joint shape.
    pub fn ge_mask(&self, a: Var, b: Var) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        binary_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| if x >= y { 1.0 } else { 0.0 })
    }

    pub fn lt_mask(&self, a: Var, b: Var) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        binary_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| if x < y { 1.0 } else { 0.0 })
    }

    /// Sum a list of scalars/tensors of identical shape.
    pub fn add_many(&self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts.first().ok_or_else(|| Error::shape("add_many", "no operands".to_string()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; gradients
    /// are only materialized for nodes flagged `needs_grad`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", nodes[root.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, contrib: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), contrib.shape());
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let ga = reduce_to_shape(&g, nodes[a.0].value.shape());
                        acc(&mut grads, a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let gb = reduce_to_shape(&g, nodes[b.0].value.shape());
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let ga = reduce_to_shape(&g, nodes[a.0].value.shape());
                        acc(&mut grads, a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let gb = reduce_to_shape(&g.map(|x| -x), nodes[b.0].value.shape());
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let ga = binary_broadcast(&g, &nodes[b.0].value, |x, y| x * y)?;
                        acc(&mut grads, a, reduce_to_shape(&ga, nodes[a.0].value.shape()));
                    }
                    if nodes[b.0].needs_grad {
                        let gb = binary_broadcast(&g, &nodes[a.0].value, |x, y| x * y)?;
                        acc(&mut grads, b, reduce_to_shape(&gb, nodes[b.0].value.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let ga = binary_broadcast(&g, &nodes[b.0].value, |x, y| x / y)?;
                        acc(&mut grads, a, reduce_to_shape(&ga, nodes[a.0].value.shape()));
                    }
                    if nodes[b.0].needs_grad {
                        // d(a/b)/db = -a / b^2 = -out / b
                        let goverb = binary_broadcast(&g, &nodes[b.0].value, |x, y| x / y)?;
                        let gb = binary_broadcast(&goverb, &node.value, |x, y| -x * y)?;
                        acc(&mut grads, b, reduce_to_shape(&gb, nodes[b.0].value.shape()));
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let mut da = Tensor::zeros(nodes[a.0].value.shape());
                        matmul2_acc(&mut da, &g, &nodes[b.0].value, false, true)?;
                        acc(&mut grads, a, da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = Tensor::zeros(nodes[b.0].value.shape());
                        matmul2_acc(&mut db, &nodes[a.0].value, &g, true, false)?;
                        acc(&mut grads, b, db);
                    }
                }
                Op::BatchedMatmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (nb, m, k) = {
                        let s = nodes[a.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let n = nodes[b.0].value.shape()[2];
                    if nodes[a.0].needs_grad {
                        let mut da = Tensor::zeros(nodes[a.0].value.shape());
                        for ib in 0..nb {
                            unsafe {
                                matrixmultiply::dgemm(
                                    m, n, k, 1.0,
                                    g.data().as_ptr().add(ib * m * n), n as isize, 1,
                                    nodes[b.0].value.data().as_ptr().add(ib * k * n), 1, n as isize,
                                    1.0,
                                    da.data_mut().as_mut_ptr().add(ib * m * k), k as isize, 1,
                                );
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = Tensor::zeros(nodes[b.0].value.shape());
                        for ib in 0..nb {
                            unsafe {
                                matrixmultiply::dgemm(
                                    k, m, n, 1.0,
                                    nodes[a.0].value.data().as_ptr().add(ib * m * k), 1, k as isize,
                                    g.data().as_ptr().add(ib * m * n), n as isize, 1,
                                    1.0,
                                    db.data_mut().as_mut_ptr().add(ib * k * n), n as isize, 1,
                                );
                            }
                        }
                        acc(&mut grads, b, db);
                    }
                }
                Op::Exp(a) => {
                    let ga = binary_broadcast(&g, &node.value, |x, y| x * y)?;
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, y| x / y)?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = binary_broadcast(&g, &node.value, |x, s| x * s * (1.0 - s))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| x * sigmoid_stable(inp))?;
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| {
                        if inp > 0.0 { x } else { x * slope }
                    })?;
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = binary_broadcast(&g, &node.value, |x, y| x * (1.0 - y * y))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| x * inp.cos())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| -x * inp.sin())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Asin(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| x / (1.0 - inp * inp).sqrt())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = binary_broadcast(&g, &node.value, |x, y| x * 0.5 / y)?;
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = binary_broadcast(&g, &nodes[a.0].value, |x, inp| x * 2.0 * inp)?;
                    acc(&mut grads, *a, ga);
                }
                Op::Neg(a) => {
                    acc(&mut grads, *a, g.map(|x| -x));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|x| c * x));
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, *a, g.clone());
                }
                Op::SumAll(a) => {
                    let gv = g.scalar_value();
                    acc(&mut grads, *a, Tensor::full(nodes[a.0].value.shape(), gv));
                }
                Op::MeanAll(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    let gv = g.scalar_value() / n;
                    acc(&mut grads, *a, Tensor::full(nodes[a.0].value.shape(), gv));
                }
                Op::SumAxes { input, axes, keep } => {
                    let in_shape = nodes[input.0].value.shape().to_vec();
                    let gk = if *keep {
                        g.clone()
                    } else {
                        let mut kept = in_shape.clone();
                        for &ax in axes {
                            kept[ax] = 1;
                        }
                        g.reshaped(kept)?
                    };
                    acc(&mut grads, *input, broadcast_to(&gk, &in_shape)?);
                }
                Op::Concat { inputs, axis } => {
                    let mut start = 0usize;
                    for v in inputs {
                        let width = nodes[v.0].value.shape()[*axis];
                        if nodes[v.0].needs_grad {
                            let part = slice_axis(&g, *axis, start, start + width)?;
                            acc(&mut grads, *v, part);
                        }
                        start += width;
                    }
                }
                Op::Slice { input, axis, start } => {
                    if nodes[input.0].needs_grad {
                        let mut full = Tensor::zeros(nodes[input.0].value.shape());
                        slice_backward_acc(&mut full, &g, *axis, *start);
                        acc(&mut grads, *input, full);
                    }
                }
                Op::Reshape(a) => {
                    let ga = g.reshaped(nodes[a.0].value.shape().to_vec())?;
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastTo(a) => {
                    acc(&mut grads, *a, reduce_to_shape(&g, nodes[a.0].value.shape()));
                }
                Op::WhereMask { mask, a, b } => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let ga = binary_broadcast(&g, mask, |x, m| x * m)?;
                        acc(&mut grads, a, reduce_to_shape(&ga, nodes[a.0].value.shape()));
                    }
                    if nodes[b.0].needs_grad {
                        let gb = binary_broadcast(&g, mask, |x, m| x * (1.0 - m))?;
                        acc(&mut grads, b, reduce_to_shape(&gb, nodes[b.0].value.shape()));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rename_shape_err(e: Error, name: &'static str) -> Error {
    match e {
        Error::Shape { details, .. } => Error::Shape { op: name, details },
        other => other,
    }
}
