//! Reverse-mode differentiation on an explicit tape.
//!
//! Every op applied to a [`Var`] or [`CVar`] evaluates eagerly and appends
//! one node to its [`Tape`]; the node keeps its forward value, so adjoint
//! rules read whatever they need straight from the inputs and output.
//! [`Tape::backward`] replays the nodes in reverse.
//!
//! Complex values carry gradients in packed form `∂L/∂re + i·∂L/∂im`. With
//! that convention the adjoint of a complex-linear map `M` is `Mᴴ`, which is
//! how the FFT rules below are derived.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::conv::{self, Conv2dParams};
use crate::error::{invalid, shape_err, Error, Result};
use crate::fft;
use crate::kernels::{self, ScoreGate};
use crate::resize;
use crate::tensor::{broadcast_shape, numel, ComplexTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Silu,
    EluPlusOne,
    Relu,
    Exp,
    Ln,
    Tanh,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::EluPlusOne => "elu_plus_one",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Unary::Silu => x * sigmoid(x),
            Unary::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => {
                0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
        }
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

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Powf(usize, f64),
    SumAxes(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow(usize, usize, usize),
    Concat(Vec<usize>, usize),
    MatMul(usize, usize),
    Softmax(usize),
    Cumsum(usize, usize),
    Conv2d(usize, usize, Option<usize>, Conv2dParams),
    Resize(usize),
    BceLogits(usize, Tensor),
    Rope(usize, f64),
    Attention(usize, usize, usize, usize, ScoreGate),
    Fft2(usize),
    Ifft2(usize),
    FromParts(usize, usize),
    Re(usize),
    Im(usize),
    Abs(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, u) => u.name(),
            Op::Powf(..) => "powf",
            Op::SumAxes(..) => "sum_axes",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow(..) => "narrow",
            Op::Concat(..) => "concat",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::Cumsum(..) => "cumsum",
            Op::Conv2d(..) => "conv2d",
            Op::Resize(..) => "bilinear_resize",
            Op::BceLogits(..) => "bce_with_logits",
            Op::Rope(..) => "rope",
            Op::Attention(..) => "softmax_attention",
            Op::Fft2(..) => "fft2",
            Op::Ifft2(..) => "ifft2",
            Op::FromParts(..) => "complex",
            Op::Re(..) => "re",
            Op::Im(..) => "im",
            Op::Abs(..) => "abs",
        }
    }
}

#[derive(Clone, Debug)]
enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Value {
    fn real(&self) -> &Tensor {
        match self {
            Value::Real(t) => t,
            Value::Complex(_) => unreachable!("expected real node"),
        }
    }

    fn complex(&self) -> &ComplexTensor {
        match self {
            Value::Complex(c) => c,
            Value::Real(_) => unreachable!("expected complex node"),
        }
    }

    fn finite(&self) -> bool {
        match self {
            Value::Real(t) => t.all_finite(),
            Value::Complex(c) => c.re().all_finite() && c.im().all_finite(),
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Ordered record of primitive applications.
///
/// A tape belongs to one thread; independent tapes may live on different
/// threads concurrently.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a real-valued node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Handle to a complex-valued node.
#[derive(Clone, Copy)]
pub struct CVar<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl std::fmt::Debug for CVar<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CVar(#{}, {:?})", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&v.id)
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes and re-arms backward.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    fn push(&self, value: Value, op: Op, tracked: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, tracked });
        inner.nodes.len() - 1
    }

    fn tracked(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].tracked
    }

    fn value(&self, id: usize) -> Value {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Grad-tracked leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: self.push(Value::Real(t), Op::Leaf, true),
        }
    }

    /// Untracked leaf; no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: self.push(Value::Real(t), Op::Leaf, false),
        }
    }

    fn real_node(&self, t: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        Var {
            tape: self,
            id: self.push(Value::Real(t), op, tracked),
        }
    }

    fn complex_node(&self, c: ComplexTensor, op: Op, inputs: &[usize]) -> CVar<'_> {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        CVar {
            tape: self,
            id: self.push(Value::Complex(c), op, tracked),
        }
    }

    /// First node whose value contains NaN or ±inf, as `(node, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Error naming the first op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Accumulates `d loss / d leaf` for every tracked leaf reachable from
    /// the scalar `loss`. A tape supports one backward pass per `reset`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::BackwardTwice);
            }
            let shape = inner.nodes[loss.id].value.real().shape().to_vec();
            if numel(&shape) != 1 {
                return Err(Error::NonScalarLoss(shape));
            }
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Value>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Value::Real(Tensor::ones(nodes[loss.id].value.real().shape())));
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, v: Value| -> Result<()> {
                if nodes[target].tracked {
                    accumulate(&mut grads[target], v)?;
                }
                Ok(())
            };
            let rv = |i: usize| nodes[i].value.real();
            match &node.op {
                Op::Leaf => {
                    out.by_node.insert(id, g.real().clone());
                }
                Op::Add(a, b) => {
                    let g = g.real();
                    send(*a, Value::Real(g.sum_to_shape(rv(*a).shape())?))?;
                    send(*b, Value::Real(g.sum_to_shape(rv(*b).shape())?))?;
                }
                Op::Sub(a, b) => {
                    let g = g.real();
                    send(*a, Value::Real(g.sum_to_shape(rv(*a).shape())?))?;
                    send(*b, Value::Real(g.map(|x| -x).sum_to_shape(rv(*b).shape())?))?;
                }
                Op::Mul(a, b) => {
                    let g = g.real();
                    let (va, vb) = (rv(*a), rv(*b));
                    if nodes[*a].tracked {
                        send(*a, Value::Real(g.zip_map(vb, |x, y| x * y)?.sum_to_shape(va.shape())?))?;
                    }
                    if nodes[*b].tracked {
                        send(*b, Value::Real(g.zip_map(va, |x, y| x * y)?.sum_to_shape(vb.shape())?))?;
                    }
                }
                Op::Div(a, b) => {
                    let g = g.real();
                    let (va, vb) = (rv(*a), rv(*b));
                    if nodes[*a].tracked {
                        send(*a, Value::Real(g.zip_map(vb, |x, y| x / y)?.sum_to_shape(va.shape())?))?;
                    }
                    if nodes[*b].tracked {
                        let y = node.value.real();
                        let gy = g.zip_map(y, |x, y| -x * y)?;
                        send(*b, Value::Real(gy.zip_map(vb, |x, y| x / y)?.sum_to_shape(vb.shape())?))?;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, Value::Real(g.real().map(|x| x * c)))?;
                }
                Op::Offset(a) => send(*a, g)?,
                Op::Unary(a, u) => {
                    let x = rv(*a);
                    let y = node.value.real();
                    let d: Vec<f64> = g
                        .real()
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                        .collect();
                    send(*a, Value::Real(Tensor::from_vec(x.shape(), d)?))?;
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let d = g.real().zip_map(rv(*a), |gv, xv| gv * p * xv.powf(p - 1.0))?;
                    send(*a, Value::Real(d))?;
                }
                Op::SumAxes(a) => {
                    let s = rv(*a).shape();
                    send(*a, Value::Real(Tensor::zeros(s).zip_map(g.real(), |_, y| y)?))?;
                }
                Op::Reshape(a) => send(*a, Value::Real(g.real().reshape(rv(*a).shape())?))?,
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*a, Value::Real(g.real().permute(&inv)?))?;
                }
                Op::Narrow(a, axis, start) => {
                    let s = rv(*a).shape();
                    let g = g.real();
                    let len = g.shape()[*axis];
                    let mut before = s.to_vec();
                    before[*axis] = *start;
                    let mut after = s.to_vec();
                    after[*axis] = s[*axis] - start - len;
                    let (zb, za) = (Tensor::zeros(&before), Tensor::zeros(&after));
                    send(*a, Value::Real(Tensor::concat(&[&zb, g, &za], *axis)?))?;
                }
                Op::Concat(parts, axis) => {
                    let g = g.real();
                    let mut start = 0;
                    for &p in parts {
                        let len = rv(p).shape()[*axis];
                        if nodes[p].tracked {
                            send(p, Value::Real(g.narrow(*axis, start, len)?))?;
                        }
                        start += len;
                    }
                }
                Op::MatMul(a, b) => {
                    let g = g.real();
                    if nodes[*a].tracked {
                        send(*a, Value::Real(kernels::matmul(g, &rv(*b).transpose_last()?)?))?;
                    }
                    if nodes[*b].tracked {
                        send(*b, Value::Real(kernels::matmul(&rv(*a).transpose_last()?, g)?))?;
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.real();
                    let n = *y.shape().last().unwrap_or(&1);
                    let mut d = g.real().clone().into_vec();
                    if n > 0 {
                        for (drow, yrow) in d.chunks_mut(n).zip(y.data().chunks(n)) {
                            let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for (dv, &yv) in drow.iter_mut().zip(yrow) {
                                *dv = yv * (*dv - dot);
                            }
                        }
                    }
                    send(*a, Value::Real(Tensor::from_vec(y.shape(), d)?))?;
                }
                Op::Cumsum(a, axis) => send(*a, Value::Real(kernels::cumsum(g.real(), *axis, true)?))?,
                Op::Conv2d(x, w, b, p) => {
                    let (gx, gw, gb) = conv::conv2d_backward(rv(*x), rv(*w), g.real(), p)?;
                    send(*x, Value::Real(gx))?;
                    send(*w, Value::Real(gw))?;
                    if let Some(b) = b {
                        send(*b, Value::Real(gb))?;
                    }
                }
                Op::Resize(a) => {
                    send(*a, Value::Real(resize::bilinear_backward(rv(*a).shape(), g.real())?))?;
                }
                Op::BceLogits(a, target) => {
                    let x = rv(*a);
                    let s = x.zip_map(target, |xv, t| sigmoid(xv) - t)?;
                    send(*a, Value::Real(s.zip_map(g.real(), |a, b| a * b)?))?;
                }
                Op::Rope(a, base) => send(*a, Value::Real(kernels::rope_rotate(g.real(), *base, -1.0)?))?,
                Op::Attention(q, k, v, heads, gate) => {
                    let (dq, dk, dv) =
                        kernels::softmax_attention_backward(rv(*q), rv(*k), rv(*v), g.real(), *heads, *gate)?;
                    send(*q, Value::Real(dq))?;
                    send(*k, Value::Real(dk))?;
                    send(*v, Value::Real(dv))?;
                }
                Op::Fft2(a) => {
                    let gc = g.complex();
                    let s = gc.shape();
                    let hw = (s[s.len() - 1] * s[s.len() - 2]) as f64;
                    let back = fft::ifft2(gc)?;
                    let (re, im) = back.into_parts();
                    send(*a, Value::Complex(ComplexTensor::new(re.map(|x| x * hw), im.map(|x| x * hw))?))?;
                }
                Op::Ifft2(a) => {
                    let gc = g.complex();
                    let s = gc.shape();
                    let hw = (s[s.len() - 1] * s[s.len() - 2]) as f64;
                    let fwd = fft::fft2(gc)?;
                    let (re, im) = fwd.into_parts();
                    send(*a, Value::Complex(ComplexTensor::new(re.map(|x| x / hw), im.map(|x| x / hw))?))?;
                }
                Op::FromParts(re, im) => {
                    let gc = g.complex();
                    send(*re, Value::Real(gc.re().clone()))?;
                    send(*im, Value::Real(gc.im().clone()))?;
                }
                Op::Re(c) => send(*c, Value::Complex(ComplexTensor::from_real(g.real().clone())))?,
                Op::Im(c) => {
                    let gr = g.real().clone();
                    send(*c, Value::Complex(ComplexTensor::new(Tensor::zeros(gr.shape()), gr)?))?;
                }
                Op::Abs(c) => {
                    let z = nodes[*c].value.complex();
                    let mag = node.value.real();
                    let gr = g.real();
                    let scale = gr.zip_map(mag, |gv, m| if m > 0.0 { gv / m } else { 0.0 })?;
                    let re = z.re().zip_map(&scale, |a, b| a * b)?;
                    let im = z.im().zip_map(&scale, |a, b| a * b)?;
                    send(*c, Value::Complex(ComplexTensor::new(re, im)?))?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Value>, v: Value) -> Result<()> {
    *slot = Some(match (slot.take(), v) {
        (None, v) => v,
        (Some(Value::Real(a)), Value::Real(b)) => Value::Real(a.zip_map(&b, |x, y| x + y)?),
        (Some(Value::Complex(a)), Value::Complex(b)) => {
            let re = a.re().zip_map(b.re(), |x, y| x + y)?;
            let im = a.im().zip_map(b.im(), |x, y| x + y)?;
            Value::Complex(ComplexTensor::new(re, im)?)
        }
        _ => unreachable!("gradient kind mismatch"),
    });
    Ok(())
}

fn same_tape(a: &Tape, b: &Tape) -> bool {
    std::ptr::eq(a, b)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).real().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.real().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        assert!(same_tape(self.tape, other.tape), "{op}: operands live on different tapes");
        let (a, b) = (self.value(), other.value());
        broadcast_shape(a.shape(), b.shape()).map_err(|_| shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())))?;
        let out = a.zip_map(&b, f)?;
        Ok(self.tape.real_node(out, mk(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.real_node(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.real_node(out, Op::Offset(self.id), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `c − self`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.neg().offset(c)
    }

    pub fn unary(self, u: Unary) -> Var<'t> {
        let out = self.value().map(|x| u.apply(x));
        self.tape.real_node(out, Op::Unary(self.id, u), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn elu_plus_one(self) -> Var<'t> {
        self.unary(Unary::EluPlusOne)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let out = self.value().map(|x| x.powf(p));
        self.tape.real_node(out, Op::Powf(self.id, p), &[self.id])
    }

    /// Sums over `axes`, keeping each as a size-1 dim.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = self.value().sum_axes(axes)?;
        Ok(self.tape.real_node(out, Op::SumAxes(self.id), &[self.id]))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let count: usize = axes.iter().map(|&a| s.get(a).copied().unwrap_or(1)).product();
        if count == 0 {
            return Err(invalid("mean_axes", "reduction over an empty axis"));
        }
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        let s = self.sum_axes(&axes).expect("axes in range");
        s.reshape(&[]).expect("single element")
    }

    pub fn mean(self) -> Var<'t> {
        let n = numel(&self.shape()).max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.real_node(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(perm)?;
        Ok(self.tape.real_node(out, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    pub fn transpose_last(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(self.tape.real_node(out, Op::Narrow(self.id, axis, start), &[self.id]))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.real_node(out, Op::Concat(ids.clone(), axis), &ids))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.real_node(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let out = kernels::softmax_lastdim(&self.value())?;
        Ok(self.tape.real_node(out, Op::Softmax(self.id), &[self.id]))
    }

    pub fn cumsum(self, axis: usize) -> Result<Var<'t>> {
        let out = kernels::cumsum(&self.value(), axis, false)?;
        Ok(self.tape.real_node(out, Op::Cumsum(self.id, axis), &[self.id]))
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, p: Conv2dParams) -> Result<Var<'t>> {
        let bval = bias.map(|b| b.value());
        let out = conv::conv2d_forward(&self.value(), &weight.value(), bval.as_ref(), &p)?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        Ok(self.tape.real_node(out, Op::Conv2d(self.id, weight.id, bias.map(|b| b.id), p), &ids))
    }

    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() == 4 && s[2] == out_h && s[3] == out_w {
            return Ok(self);
        }
        let out = resize::bilinear_forward(&self.value(), out_h, out_w)?;
        Ok(self.tape.real_node(out, Op::Resize(self.id), &[self.id]))
    }

    /// Elementwise `max(x,0) − x·t + ln(1 + e^{−|x|})`, the binary
    /// cross-entropy of `sigmoid(x)` against `t` without overflow.
    pub fn bce_with_logits(self, target: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(shape_err("bce_with_logits", format!("{:?}", x.shape()), format!("{:?}", target.shape())));
        }
        let out = x.zip_map(target, |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())?;
        Ok(self.tape.real_node(out, Op::BceLogits(self.id, target.clone()), &[self.id]))
    }

    /// Rotary position encoding over `[.., N, dim]`.
    pub fn rope(self, base: f64) -> Result<Var<'t>> {
        let out = kernels::rope_rotate(&self.value(), base, 1.0)?;
        Ok(self.tape.real_node(out, Op::Rope(self.id, base), &[self.id]))
    }

    pub(crate) fn fused_attention(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, gate: ScoreGate) -> Result<Var<'t>> {
        let out = kernels::softmax_attention_forward(&q.value(), &k.value(), &v.value(), heads, gate)?;
        Ok(q.tape.real_node(out, Op::Attention(q.id, k.id, v.id, heads, gate), &[q.id, k.id, v.id]))
    }

    /// Complex view `self + 0i`.
    pub fn to_complex(self) -> CVar<'t> {
        let zeros = self.tape.constant(Tensor::zeros(&self.shape()));
        CVar::from_parts(self, zeros).expect("shapes equal")
    }

    pub fn fft2(self) -> Result<CVar<'t>> {
        self.to_complex().fft2()
    }
}

impl<'t> CVar<'t> {
    pub fn value(&self) -> ComplexTensor {
        self.tape.value(self.id).complex().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.complex().shape().to_vec()
    }

    pub fn from_parts(re: Var<'t>, im: Var<'t>) -> Result<CVar<'t>> {
        let c = ComplexTensor::new(re.value(), im.value())?;
        Ok(re.tape.complex_node(c, Op::FromParts(re.id, im.id), &[re.id, im.id]))
    }

    pub fn re(self) -> Var<'t> {
        let out = self.value().re().clone();
        self.tape.real_node(out, Op::Re(self.id), &[self.id])
    }

    pub fn im(self) -> Var<'t> {
        let out = self.value().im().clone();
        self.tape.real_node(out, Op::Im(self.id), &[self.id])
    }

    /// Elementwise modulus; the adjoint uses subgradient 0 at exact zeros.
    pub fn abs(self) -> Var<'t> {
        let out = self.value().abs();
        self.tape.real_node(out, Op::Abs(self.id), &[self.id])
    }

    pub fn fft2(self) -> Result<CVar<'t>> {
        let out = fft::fft2(&self.value())?;
        Ok(self.tape.complex_node(out, Op::Fft2(self.id), &[self.id]))
    }

    pub fn ifft2(self) -> Result<CVar<'t>> {
        let out = fft::ifft2(&self.value())?;
        Ok(self.tape.complex_node(out, Op::Ifft2(self.id), &[self.id]))
    }

    /// Multiplies both parts by a real (broadcastable) factor.
    pub fn mul_real(self, r: Var<'t>) -> Result<CVar<'t>> {
        CVar::from_parts(self.re().mul(r)?, self.im().mul(r)?)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<CVar<'t>> {
        CVar::from_parts(self.re().reshape(shape)?, self.im().reshape(shape)?)
    }

    pub fn transpose_last(self) -> Result<CVar<'t>> {
        CVar::from_parts(self.re().transpose_last()?, self.im().transpose_last()?)
    }

    /// Batched complex product built from four real products.
    pub fn matmul(self, other: CVar<'t>) -> Result<CVar<'t>> {
        let (a, b) = (self.re(), self.im());
        let (c, d) = (other.re(), other.im());
        let re = a.matmul(c)?.sub(b.matmul(d)?)?;
        let im = a.matmul(d)?.add(b.matmul(c)?)?;
        CVar::from_parts(re, im)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let g = tape.backward(x.sigmoid().sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_and_repeated_backward_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let l = x.sum();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let c = tape.constant(Tensor::full(&[2], 5.0));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1], 2.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_finite_value_is_attributed() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], -1.0));
        let _ = x.unary(Unary::Ln);
        let err = tape.check_finite().unwrap_err();
        assert!(err.to_string().contains("`ln`"), "{err}");
    }
}
