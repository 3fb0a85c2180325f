//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every backward rule is expressed with the same differentiable operations
//! used in the forward pass, so [`Tape::grad`] returns gradients that are
//! themselves nodes on the tape. Differentiating a function of those
//! gradients (gradient matching, unrolled SGD) is then just another call to
//! [`Tape::grad`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, numel, ConvGeom, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SumChannels(usize),
    BroadcastChannels(usize),
    Conv(usize, usize, ConvGeom),
    ConvInput(usize, usize, ConvGeom),
    ConvWeight(usize, usize, ConvGeom),
    LogSoftmax(usize),
    SelectRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    TotalVariation(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Conv(a, b, _) | ConvInput(a, b, _) | ConvWeight(a, b, _) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | Powf(a, _) | Exp(a) | Sigmoid(a) | Tanh(a)
            | Relu(a) | Abs(a) | Transpose(a) | Reshape(a) | Sum(a) | BroadcastScalar(a)
            | SumRows(a) | BroadcastRows(a) | SumCols(a) | BroadcastCols(a)
            | SumChannels(a) | BroadcastChannels(a) | LogSoftmax(a) | TotalVariation(a) => {
                [Some(a), None]
            }
            SelectRows(a, _) | ScatterRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only computation record. Node ids are topologically ordered.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a leaf. Leaves are differentiable only if passed to `grad`.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.input(Tensor::scalar(v))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars are recorded on the tape and can be differentiated
    /// again. Targets that do not influence `output` get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.value().len(), 1, "grad() needs a scalar output");
        let end = output.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..end].iter().map(|n| n.op.clone()).collect();
        let mut needed = vec![false; end];
        for w in wrt {
            if w.id < end {
                needed[w.id] = true;
            }
        }
        for id in 0..end {
            if !needed[id] {
                needed[id] = ops[id].parents().iter().flatten().any(|&p| needed[p]);
            }
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        grads[output.id] = Some(self.input(Tensor::full(output.value().shape(), 1.0)));
        for id in (0..end).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let out = Var { tape: self, id };
            for (p, gp) in self.backward(&ops[id], out, g, &needed) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.input(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }

    fn backward<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        needed: &[bool],
    ) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let v = |id: usize| Var { tape: self, id };
        let mut res = Vec::with_capacity(2);
        let mut put = |p: usize, f: &dyn Fn() -> Var<'t>| {
            if needed[p] {
                res.push((p, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                put(*a, &|| g);
                put(*b, &|| g);
            }
            Sub(a, b) => {
                put(*a, &|| g);
                put(*b, &|| -g);
            }
            Mul(a, b) => {
                put(*a, &|| g * v(*b));
                put(*b, &|| g * v(*a));
            }
            Neg(a) => put(*a, &|| -g),
            Scale(a, c) => put(*a, &|| g.scale(*c)),
            AddScalar(a) => put(*a, &|| g),
            Powf(a, p) => put(*a, &|| g * v(*a).powf(p - 1.0).scale(*p)),
            Exp(a) => put(*a, &|| g * out),
            Sigmoid(a) => put(*a, &|| g * (out * (-out).add_scalar(1.0))),
            Tanh(a) => put(*a, &|| g * (-(out * out)).add_scalar(1.0)),
            Relu(a) => put(*a, &|| {
                let mask = self.input(self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                g * mask
            }),
            Abs(a) => put(*a, &|| {
                let sign = self.input(self.value(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                g * sign
            }),
            MatMul(a, b) => {
                put(*a, &|| g.matmul(v(*b).t()));
                put(*b, &|| v(*a).t().matmul(g));
            }
            Transpose(a) => put(*a, &|| g.t()),
            Reshape(a) => put(*a, &|| g.reshape(self.value(*a).shape())),
            Sum(a) => put(*a, &|| g.broadcast_scalar(self.value(*a).shape())),
            BroadcastScalar(a) => put(*a, &|| g.sum().reshape(self.value(*a).shape())),
            SumRows(a) => put(*a, &|| g.broadcast_rows(self.value(*a).shape()[0])),
            BroadcastRows(a) => put(*a, &|| g.sum_rows()),
            SumCols(a) => put(*a, &|| g.broadcast_cols(self.value(*a).shape()[1])),
            BroadcastCols(a) => put(*a, &|| g.sum_cols()),
            SumChannels(a) => put(*a, &|| g.broadcast_channels(out.value().len(), out_shape_of(self, *a))),
            BroadcastChannels(a) => put(*a, &|| g.sum_channels()),
            Conv(x, w, geom) => {
                put(*x, &|| g.conv_input(v(*w), *geom));
                put(*w, &|| v(*x).conv_weight(g, *geom));
            }
            ConvInput(gy, w, geom) => {
                put(*gy, &|| g.conv_raw(v(*w), *geom));
                put(*w, &|| g.conv_weight(v(*gy), *geom));
            }
            ConvWeight(x, gy, geom) => {
                put(*x, &|| v(*gy).conv_input(g, *geom));
                put(*gy, &|| v(*x).conv_raw(g, *geom));
            }
            LogSoftmax(a) => put(*a, &|| {
                let k = out.value().shape()[1];
                g - out.exp() * g.sum_cols().broadcast_cols(k)
            }),
            SelectRows(a, idx) => {
                put(*a, &|| g.scatter_rows(idx.clone(), self.value(*a).shape()[0]))
            }
            ScatterRows(a, idx) => put(*a, &|| g.select_rows_rc(idx.clone())),
            TotalVariation(a) => put(*a, &|| {
                let x = self.value(*a);
                let stencil = self.input(tv_subgradient(&x));
                g.broadcast_scalar(x.shape()) * stencil
            }),
        }
        res
    }
}

fn out_shape_of(tape: &Tape, id: usize) -> Vec<usize> {
    tape.value(id).shape().to_vec()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Self {
        let out = f(&self.value());
        self.tape.push(out, op)
    }

    fn binary(self, other: Self, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let out = f(&self.value(), &other.value());
        self.tape.push(out, op)
    }

    pub fn scale(self, c: f64) -> Self {
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    pub fn powf(self, p: f64) -> Self {
        self.unary(Op::Powf(self.id, p), |a| a.map(|x| x.powf(p)))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn abs(self) -> Self {
        self.unary(Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn matmul(self, other: Self) -> Self {
        self.binary(other, Op::MatMul(self.id, other.id), tensor::matmul)
    }

    /// 2-D transpose.
    pub fn t(self) -> Self {
        self.unary(Op::Transpose(self.id), tensor::transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let shape = shape.to_vec();
        self.unary(Op::Reshape(self.id), |a| a.clone().reshape(&shape))
    }

    pub fn sum(self) -> Self {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Expands a one-element var to `shape`.
    pub fn broadcast_scalar(self, shape: &[usize]) -> Self {
        self.unary(Op::BroadcastScalar(self.id), |a| Tensor::full(shape, a.item()))
    }

    /// Multiplies every element by the one-element var `s`.
    pub fn mul_scalar_var(self, s: Self) -> Self {
        let shape = self.shape();
        self * s.broadcast_scalar(&shape)
    }

    /// `[n,k] -> [k]`
    pub fn sum_rows(self) -> Self {
        self.unary(Op::SumRows(self.id), |a| {
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; k];
            for i in 0..n {
                for (o, x) in out.iter_mut().zip(&a.data()[i * k..(i + 1) * k]) {
                    *o += x;
                }
            }
            Tensor::new(vec![k], out)
        })
    }

    /// `[k] -> [n,k]`
    pub fn broadcast_rows(self, n: usize) -> Self {
        self.unary(Op::BroadcastRows(self.id), |a| {
            let k = a.len();
            let mut out = Vec::with_capacity(n * k);
            for _ in 0..n {
                out.extend_from_slice(a.data());
            }
            Tensor::new(vec![n, k], out)
        })
    }

    /// `[n,k] -> [n]`
    pub fn sum_cols(self) -> Self {
        self.unary(Op::SumCols(self.id), |a| {
            let (n, k) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![n], (0..n).map(|i| a.data()[i * k..(i + 1) * k].iter().sum()).collect())
        })
    }

    /// `[n] -> [n,k]`
    pub fn broadcast_cols(self, k: usize) -> Self {
        self.unary(Op::BroadcastCols(self.id), |a| {
            let n = a.len();
            let mut out = Vec::with_capacity(n * k);
            for &x in a.data() {
                out.extend(std::iter::repeat_n(x, k));
            }
            Tensor::new(vec![n, k], out)
        })
    }

    /// Adds a `[k]` bias to every row of `[n,k]`.
    pub fn add_bias(self, bias: Self) -> Self {
        let n = self.value().shape()[0];
        self + bias.broadcast_rows(n)
    }

    /// `[N,C,H,W] -> [C]`
    pub fn sum_channels(self) -> Self {
        self.unary(Op::SumChannels(self.id), |a| {
            let s = a.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut out = vec![0.0; c];
            for ni in 0..n {
                for (ci, o) in out.iter_mut().enumerate() {
                    let base = (ni * c + ci) * hw;
                    *o += a.data()[base..base + hw].iter().sum::<f64>();
                }
            }
            Tensor::new(vec![c], out)
        })
    }

    /// `[C] -> shape` where `shape = [N,C,H,W]`.
    fn broadcast_channels(self, c: usize, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape[1], c);
        self.unary(Op::BroadcastChannels(self.id), |a| {
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut out = Vec::with_capacity(n * c * hw);
            for _ in 0..n {
                for ci in 0..c {
                    out.extend(std::iter::repeat_n(a.data()[ci], hw));
                }
            }
            Tensor::new(shape.clone(), out)
        })
    }

    /// Adds a per-channel `[C]` bias to `[N,C,H,W]`.
    pub fn add_channel_bias(self, bias: Self) -> Self {
        let shape = self.shape();
        self + bias.broadcast_channels(shape[1], shape)
    }

    fn conv_raw(self, w: Self, geom: ConvGeom) -> Self {
        self.binary(w, Op::Conv(self.id, w.id, geom), |x, w| tensor::conv2d(x, w, geom))
    }

    fn conv_input(self, w: Self, geom: ConvGeom) -> Self {
        self.binary(w, Op::ConvInput(self.id, w.id, geom), |gy, w| tensor::conv2d_input(gy, w, geom))
    }

    fn conv_weight(self, gy: Self, geom: ConvGeom) -> Self {
        self.binary(gy, Op::ConvWeight(self.id, gy.id, geom), |x, gy| {
            tensor::conv2d_weight(x, gy, geom)
        })
    }

    /// 2-D convolution of `[N,C,H,W]` with `[O,C,k,k]` weights.
    pub fn conv2d(self, w: Self, stride: usize, pad: usize) -> Self {
        let s = self.shape();
        let k = w.value().shape()[2];
        let geom = ConvGeom { kernel: k, stride, pad, in_h: s[2], in_w: s[3] };
        self.conv_raw(w, geom)
    }

    /// Transposed convolution of `[N,O,h,w]` with `[O,C,k,k]` weights,
    /// producing `[N,C,out_h,out_w]`.
    pub fn conv_transpose2d(self, w: Self, stride: usize, pad: usize, out_hw: (usize, usize)) -> Self {
        let k = w.value().shape()[2];
        let geom = ConvGeom { kernel: k, stride, pad, in_h: out_hw.0, in_w: out_hw.1 };
        let s = self.shape();
        assert_eq!((s[2], s[3]), (geom.out_h(), geom.out_w()), "transposed conv geometry");
        self.conv_input(w, geom)
    }

    /// Row-wise log-softmax of `[n,k]` logits.
    pub fn log_softmax(self) -> Self {
        self.unary(Op::LogSoftmax(self.id), log_softmax_rows)
    }

    pub fn softmax(self) -> Self {
        self.log_softmax().exp()
    }

    pub fn select_rows(self, idx: &[usize]) -> Self {
        self.select_rows_rc(Rc::from(idx))
    }

    fn select_rows_rc(self, idx: Rc<[usize]>) -> Self {
        let op = Op::SelectRows(self.id, idx.clone());
        self.unary(op, |a| a.select_rows(&idx))
    }

    fn scatter_rows(self, idx: Rc<[usize]>, n: usize) -> Self {
        let op = Op::ScatterRows(self.id, idx.clone());
        self.unary(op, |a| {
            let row = a.len() / a.shape()[0].max(1);
            let mut shape = a.shape().to_vec();
            shape[0] = n;
            let mut out = vec![0.0; n * row];
            for (src, &dst) in idx.iter().enumerate() {
                for (o, x) in out[dst * row..(dst + 1) * row].iter_mut().zip(a.row(src)) {
                    *o += x;
                }
            }
            Tensor::new(shape, out)
        })
    }

    /// Anisotropic total variation of `[N,C,H,W]`: absolute horizontal and
    /// vertical neighbour differences, divided by the element count.
    pub fn total_variation(self) -> Self {
        self.unary(Op::TotalVariation(self.id), |a| Tensor::scalar(total_variation(a)))
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.zip(b, |x, y| x + y))
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.zip(b, |x, y| x - y))
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a.zip(b, |x, y| x * y))
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(Op::Neg(self.id), |a| a.map(|x| -x))
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

pub(crate) fn log_softmax_rows(a: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = &a.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![n, k], out)
}

pub(crate) fn total_variation(a: &Tensor) -> f64 {
    let s = a.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = a.data();
    let mut tv = 0.0;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let x = d[base + i * w + j];
                if j + 1 < w {
                    tv += (d[base + i * w + j + 1] - x).abs();
                }
                if i + 1 < h {
                    tv += (d[base + (i + 1) * w + j] - x).abs();
                }
            }
        }
    }
    tv / numel(s) as f64
}

fn tv_subgradient(a: &Tensor) -> Tensor {
    let s = a.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = a.data();
    let mut g = vec![0.0; d.len()];
    let norm = 1.0 / numel(s) as f64;
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = base + i * w + j;
                if j + 1 < w {
                    let sg = sign(d[at + 1] - d[at]) * norm;
                    g[at + 1] += sg;
                    g[at] -= sg;
                }
                if i + 1 < h {
                    let sg = sign(d[at + w] - d[at]) * norm;
                    g[at + w] += sg;
                    g[at] -= sg;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), g)
}
