use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::ops;
use std::rc::Rc;

use crate::array::Array;
use crate::error::{NdError, Result};

/// Recorded operation of a node; indices refer to earlier nodes on the same tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clip(usize, f64, f64),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    SumAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
        keepdim: bool,
    },
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Pad {
        x: usize,
        axis: usize,
        start: usize,
    },
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Minimum(a, b) | MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Neg(x)
            | Exp(x)
            | Log(x)
            | Tanh(x)
            | Relu(x)
            | Softplus(x)
            | Sigmoid(x)
            | Square(x)
            | Sqrt(x)
            | Abs(x)
            | Scale(x, _)
            | AddScalar(x)
            | Clip(x, _, _)
            | SumAll(x)
            | Reshape(x)
            | BroadcastTo(x)
            | SumTo(x) => f(*x),
            SumAxis { x, .. } | Slice { x, .. } | Pad { x, .. } => f(*x),
            Concat { parts, .. } => parts.iter().copied().for_each(f),
        }
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Every operation on a [`Var`] appends a node. Ids grow monotonically, so
/// node order is a topological order of the graph. While a reverse pass runs
/// in create-graph mode the adjoint computations are themselves recorded,
/// which is what makes gradients of gradients available.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// First-order gradients of a scalar with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: BTreeMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.by_id.get(&v.id)
    }

    /// Gradient for `v`, zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&v.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn expect<T>(r: Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => panic!("{e}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_rc(&self, value: Rc<Array>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let mut requires_grad = false;
        if self.recording.get() {
            op.for_each_parent(|p| requires_grad |= nodes[p].requires_grad);
        }
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Array, op: Op) -> Var<'_> {
        self.push_rc(Rc::new(value), op)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::scalar(value))
    }

    pub fn try_concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Array> = values.iter().map(|v| v.as_ref()).collect();
        let out = Array::concat(&refs, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        expect(self.try_concat(parts, axis))
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// can be differentiated again; otherwise they are constants.
    pub fn grad<'t>(
        &'t self,
        root: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let mut target = vec![false; root.id + 1];
        for w in wrt {
            if w.id <= root.id {
                target[w.id] = true;
            }
        }
        let needed = {
            let nodes = self.nodes.borrow();
            let mut needed = vec![false; root.id + 1];
            for (i, node) in nodes[..=root.id].iter().enumerate() {
                let mut n = target[i];
                if !n && node.requires_grad {
                    node.op.for_each_parent(|p| n |= needed[p]);
                }
                needed[i] = n;
            }
            needed
        };
        let grads = self.reverse(root, &needed, create_graph)?;
        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Array::zeros(&w.shape())))
            })
            .collect())
    }

    /// First-order gradients of the scalar `root` with respect to every
    /// trainable leaf that influences it.
    pub fn backward<'t>(&'t self, root: Var<'t>) -> Result<Gradients> {
        let (needed, leaves): (Vec<bool>, Vec<usize>) = {
            let nodes = self.nodes.borrow();
            let needed = nodes[..=root.id].iter().map(|n| n.requires_grad).collect();
            let leaves = nodes[..=root.id]
                .iter()
                .enumerate()
                .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
                .map(|(i, _)| i)
                .collect();
            (needed, leaves)
        };
        let grads = self.reverse(root, &needed, false)?;
        let mut by_id = BTreeMap::new();
        for id in leaves {
            if let Some(g) = grads[id] {
                by_id.insert(id, (*g.value()).clone());
            }
        }
        Ok(Gradients { by_id })
    }

    fn reverse<'t>(
        &'t self,
        root: Var<'t>,
        needed: &[bool],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        let root_value = root.value();
        if root_value.len() != 1 {
            return Err(NdError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let previous = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; root.id + 1];
        if needed[root.id] {
            grads[root.id] = Some(self.constant(Array::ones(root_value.shape())));
        }
        for id in (0..=root.id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            self.propagate(id, &op, g, needed, &mut grads);
        }
        self.recording.set(previous);
        Ok(grads)
    }

    fn propagate<'t>(
        &'t self,
        id: usize,
        op: &Op,
        g: Var<'t>,
        needed: &[bool],
        grads: &mut [Option<Var<'t>>],
    ) {
        let mut acc = |p: usize, contrib: Var<'t>| {
            if needed[p] {
                grads[p] = Some(match grads[p] {
                    Some(existing) => existing + contrib,
                    None => contrib,
                });
            }
        };
        let y = self.var(id);
        let v = |i: usize| self.var(i);
        let mask = |x: usize, f: &dyn Fn(f64) -> f64| self.constant(self.value_of(x).map(f));
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needed[a] {
                    acc(a, g.sum_to(&v(a).shape()));
                }
                if needed[b] {
                    acc(b, g.sum_to(&v(b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    acc(a, g.sum_to(&v(a).shape()));
                }
                if needed[b] {
                    acc(b, (-g).sum_to(&v(b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    acc(a, (g * v(b)).sum_to(&v(a).shape()));
                }
                if needed[b] {
                    acc(b, (g * v(a)).sum_to(&v(b).shape()));
                }
            }
            Op::Div(a, b) => {
                if needed[a] {
                    acc(a, (g / v(b)).sum_to(&v(a).shape()));
                }
                if needed[b] {
                    acc(b, (-(g * y) / v(b)).sum_to(&v(b).shape()));
                }
            }
            Op::Minimum(a, b) => {
                let va = self.value_of(a);
                let vb = self.value_of(b);
                let pick_a = expect(va.zip_with(&vb, "minimum", |x, z| f64::from(x <= z)));
                if needed[a] {
                    let m = self.constant(pick_a.clone());
                    acc(a, (g * m).sum_to(va.shape()));
                }
                if needed[b] {
                    let m = self.constant(pick_a.map(|p| 1.0 - p));
                    acc(b, (g * m).sum_to(vb.shape()));
                }
            }
            Op::Neg(x) => acc(x, -g),
            Op::Exp(x) => acc(x, g * y),
            Op::Log(x) => acc(x, g / v(x)),
            Op::Tanh(x) => acc(x, g * (1.0 - y.square())),
            Op::Relu(x) => acc(x, g * mask(x, &|t| f64::from(t > 0.0))),
            Op::Softplus(x) => acc(x, g * v(x).sigmoid()),
            Op::Sigmoid(x) => acc(x, g * y * (1.0 - y)),
            Op::Square(x) => acc(x, g * v(x) * 2.0),
            Op::Sqrt(x) => acc(x, g * 0.5 / y),
            Op::Abs(x) => acc(x, g * mask(x, &f64_sign)),
            Op::Scale(x, c) => acc(x, g * c),
            Op::AddScalar(x) => acc(x, g),
            Op::Clip(x, lo, hi) => acc(x, g * mask(x, &|t| f64::from(t >= lo && t <= hi))),
            Op::MatMul { a, b, ta, tb } => {
                if needed[a] {
                    let ga = if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    };
                    acc(a, ga);
                }
                if needed[b] {
                    let gb = if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    };
                    acc(b, gb);
                }
            }
            Op::SumAll(x) => acc(x, g.broadcast_to(&v(x).shape())),
            Op::SumAxis { x, axis, keepdim } => {
                let shape = v(x).shape();
                let g = if keepdim {
                    g
                } else {
                    let mut kept = shape.clone();
                    kept[axis] = 1;
                    g.reshape(&kept)
                };
                acc(x, g.broadcast_to(&shape));
            }
            Op::Reshape(x) => acc(x, g.reshape(&v(x).shape())),
            Op::BroadcastTo(x) => acc(x, g.sum_to(&v(x).shape())),
            Op::SumTo(x) => acc(x, g.broadcast_to(&v(x).shape())),
            Op::Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let n = v(p).shape()[axis];
                    if needed[p] {
                        acc(p, g.slice_axis(axis, offset, offset + n));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = v(x).shape()[axis];
                acc(x, g.pad_axis(axis, start, full));
            }
            Op::Pad { x, axis, start } => {
                let n = v(x).shape()[axis];
                acc(x, g.slice_axis(axis, start, start + n));
            }
        }
    }
}

fn f64_sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        expect(self.value().item())
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let out = self.value().zip_with(&other.value(), name, f)?;
        Ok(self.tape.push(out, op))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn try_minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "minimum", f64::min, Op::Minimum(self.id, other.id))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        expect(self.try_minimum(other))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    /// Absolute value; subgradient zero at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|x| x.clamp(lo, hi), Op::Clip(self.id, lo, hi))
    }

    pub fn try_matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let out = self.value().matmul_t(&other.value(), ta, tb)?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        expect(self.try_matmul_t(other, ta, tb))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum_all();
        self.tape.push(Array::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn try_sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let out = self.value().sum_axis(axis, keepdim)?;
        Ok(self.tape.push(
            out,
            Op::SumAxis {
                x: self.id,
                axis,
                keepdim,
            },
        ))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        expect(self.try_sum_axis(axis, keepdim))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn try_reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        expect(self.try_reshape(shape))
    }

    pub fn try_broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().broadcast_to(shape)?;
        Ok(self.tape.push(out, Op::BroadcastTo(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        expect(self.try_broadcast_to(shape))
    }

    pub fn try_sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        if value.shape() == shape {
            return Ok(self);
        }
        let out = value.sum_to(shape)?;
        Ok(self.tape.push(out, Op::SumTo(self.id)))
    }

    pub fn sum_to(self, shape: &[usize]) -> Var<'t> {
        expect(self.try_sum_to(shape))
    }

    pub fn try_slice_axis(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_axis(axis, start, end)?;
        Ok(self.tape.push(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        expect(self.try_slice_axis(axis, start, end))
    }

    pub fn pad_axis(self, axis: usize, start: usize, full: usize) -> Var<'t> {
        let out = expect(self.value().pad_axis(axis, start, full));
        self.tape.push(
            out,
            Op::Pad {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let value = self.value();
        self.tape.push_rc(value, Op::Leaf)
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $try:ident) => {
        impl<'t> ops::$trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                expect(self.$try(rhs))
            }
        }
    };
}

var_binop!(Add, add, try_add);
var_binop!(Sub, sub, try_sub);
var_binop!(Mul, mul, try_mul);
var_binop!(Div, div, try_div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.scale(1.0 / rhs)
    }
}

impl<'t> ops::Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs).add_scalar(self)
    }
}

impl<'t> ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}
