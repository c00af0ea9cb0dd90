//! Dense f64 tensors and a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its output
//! [`Tensor`] and the operation that produced it; inputs always have smaller
//! ids than the node that consumes them, so the backward pass is a single
//! sweep in decreasing id order.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, usage_err, Error, Result};
use crate::nn;

/// Lower clamp applied before every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| shape_err!("shape {shape:?} overflows"))?;
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access used by optimizers to apply parameter updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(shape_err!(
                    "gradient length {} does not match tensor length {}",
                    g.len(),
                    self.data.len()
                ));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(usage_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Value-only copy: no gradient slot, not tracked.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    LogClamped,
    Exp,
    Max0,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "neg" => Self::Neg,
            "log_clamped" => Self::LogClamped,
            "exp" => Self::Exp,
            "max0" => Self::Max0,
            other => return Err(usage_err!("unknown elementwise op '{other}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl FromStr for ReduceOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "max" => Self::Max,
            other => return Err(usage_err!("unknown reduce op '{other}'")),
        })
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(ElementwiseOp, Var, Var),
    Unary(ElementwiseOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        // output flat index for every input element
        index_map: Vec<usize>,
        count: usize,
        // for max: winning input index per output element
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: nn::ConvGeometry,
        cols: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxChannel(Var),
    PadConcat(Vec<Var>),
    // output element i is input element gather[i]
    Permute { input: Var, gather: Vec<usize> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(ElementwiseOp::Add, ..) => "add",
            Op::Binary(ElementwiseOp::Sub, ..) => "sub",
            Op::Binary(..) => "mul",
            Op::Unary(ElementwiseOp::Neg, _) => "neg",
            Op::Unary(ElementwiseOp::LogClamped, _) => "log_clamped",
            Op::Unary(ElementwiseOp::Exp, _) => "exp",
            Op::Unary(..) => "max0",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Reduce { op, .. } => match op {
                ReduceOp::Sum => "sum",
                ReduceOp::Mean => "mean",
                ReduceOp::Max => "max",
            },
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxChannel(_) => "softmax_channel",
            Op::PadConcat(_) => "pad_concat",
            Op::Permute { .. } => "permute",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::SoftmaxChannel(a) => vec![*a],
            Op::Reduce { input, .. } => vec![*input],
            Op::Conv2d { x, weight, bias, .. } => vec![*x, *weight, *bias],
            Op::PadConcat(v) => v.clone(),
            Op::Permute { input, .. } => vec![*input],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph, rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().enumerate().map(|(i, n)| {
                (i, n.op.tag(), n.op.inputs(), n.value.shape.clone())
            }))
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false))
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Operation tag and input ids of a node.
    pub fn node_info(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.tag(), op.inputs())
    }

    /// Moves the value out of a node (used to hand results to callers once
    /// an episode is over).
    pub fn take_value(&mut self, v: Var) -> Tensor {
        let node = &mut self.nodes[v.0];
        std::mem::replace(&mut node.value, Tensor::scalar(0.0))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` if any input requires a gradient, otherwise stores the
    /// result as a constant leaf.
    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (element {bad} = {})",
                op.tag(),
                data[bad]
            )));
        }
        let tracked = op.inputs().iter().any(|&i| self.requires_grad(i));
        let value = Tensor {
            shape,
            data,
            requires_grad: tracked,
            grad: None,
        };
        Ok(if tracked {
            self.push(op, value)
        } else {
            self.push(Op::Leaf, value)
        })
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (true, None) => Err(usage_err!("{op:?} needs two operands")),
            (false, None) => self.unary(op, a),
            (false, Some(_)) => Err(usage_err!("{op:?} takes a single operand")),
        }
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err!(
                "{op:?}: shapes {:?} and {:?} differ",
                ta.shape,
                tb.shape
            ));
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        self.record(Op::Binary(op, a, b), shape, data)
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let f: fn(f64) -> f64 = match op {
            ElementwiseOp::Neg => |x| -x,
            ElementwiseOp::LogClamped => |x| x.max(LOG_CLAMP).ln(),
            ElementwiseOp::Exp => f64::exp,
            _ => |x| x.max(0.0),
        };
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let shape = ta.shape.clone();
        self.record(Op::Unary(op, a), shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Neg, a)
    }

    pub fn log_clamped(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::LogClamped, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn max0(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Max0, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x * k).collect();
        let shape = ta.shape.clone();
        self.record(Op::Scale(a, k), shape, data)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x + k).collect();
        let shape = ta.shape.clone();
        self.record(Op::AddScalar(a), shape, data)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape.clone();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(shape_err!("axis {ax} out of range for rank {rank}"));
            }
            if reduced[ax] {
                return Err(shape_err!("axis {ax} listed twice"));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&d| !reduced[d])
            .map(|d| shape[d])
            .collect();
        let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
        let index_map = reduction_index_map(&shape, &reduced);
        let out_len: usize = out_shape.iter().product();
        let input = &self.value(a).data;
        let mut out = vec![0.0; out_len];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (x, &o) in input.iter().zip(&index_map) {
                    out[o] += x;
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / count as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::Max => {
                out.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out_len];
                for (i, (&x, &o)) in input.iter().zip(&index_map).enumerate() {
                    if argmax[o] == usize::MAX || x > out[o] {
                        out[o] = x;
                        argmax[o] = i;
                    }
                }
            }
        }
        self.record(
            Op::Reduce {
                op,
                input: a,
                index_map,
                count,
                argmax,
            },
            out_shape,
            out,
        )
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Mean, a, &axes)
    }

    /// 2-D cross-correlation of `x` [C_in,H,W] with `weight` [C_out,C_in,k,k].
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = nn::ConvGeometry::infer(
            self.value(x).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let cols = nn::im2col(&self.value(x).data, &geom);
        let out = nn::conv_forward(&cols, &self.value(weight).data, &self.value(bias).data, &geom);
        let shape = vec![geom.c_out, geom.h_out, geom.w_out];
        let tracked = [x, weight, bias].iter().any(|&v| self.requires_grad(v));
        let cols = if tracked { cols } else { Vec::new() };
        self.record(
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            shape,
            out,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(usage_err!("leaky-ReLU slope {slope} outside [0,1)"));
        }
        let ta = self.value(a);
        let data = ta
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = ta.shape.clone();
        self.record(Op::LeakyRelu(a, slope), shape, data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| nn::sigmoid(x)).collect();
        let shape = ta.shape.clone();
        self.record(Op::Sigmoid(a), shape, data)
    }

    /// Softmax over axis 0 of a [C,H,W] tensor.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 3 {
            return Err(shape_err!("softmax_channel expects [C,H,W], got {:?}", ta.shape));
        }
        let data = nn::softmax_columns(&ta.data, ta.shape[0]);
        let shape = ta.shape.clone();
        self.record(Op::SoftmaxChannel(a), shape, data)
    }

    /// Zero-pads every [C_m,H_m,W_m] input to the largest spatial size
    /// (extra row/column at the bottom/right) and concatenates on channels.
    pub fn pad_concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(usage_err!("pad_concat needs at least one input"));
        }
        let mut h_max = 0;
        let mut w_max = 0;
        let mut c_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != 3 {
                return Err(shape_err!("pad_concat expects [C,H,W] inputs, got {s:?}"));
            }
            c_total += s[0];
            h_max = h_max.max(s[1]);
            w_max = w_max.max(s[2]);
        }
        let plane = h_max * w_max;
        let mut out = vec![0.0; c_total * plane];
        let mut c_off = 0;
        for &v in inputs {
            let t = self.value(v);
            let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
            let (top, left) = pad_offsets(h, w, h_max, w_max);
            for ci in 0..c {
                for y in 0..h {
                    let src = &t.data[(ci * h + y) * w..(ci * h + y + 1) * w];
                    let dst = (c_off + ci) * plane + (y + top) * w_max + left;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
            c_off += c;
        }
        self.record(
            Op::PadConcat(inputs.to_vec()),
            vec![c_total, h_max, w_max],
            out,
        )
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let t = ta.reshape(shape.to_vec())?;
        let gather = (0..t.numel()).collect();
        self.record(Op::Permute { input: a, gather }, t.shape, t.data)
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&k| k >= rank || std::mem::replace(&mut seen[k], true)) {
            return Err(shape_err!("{axes:?} is not a permutation of {rank} axes"));
        }
        let in_strides = strides(&ta.shape);
        let shape: Vec<usize> = axes.iter().map(|&k| ta.shape[k]).collect();
        let n = ta.numel();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            gather.push(idx.iter().zip(axes).map(|(&i, &k)| i * in_strides[k]).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = gather.iter().map(|&i| ta.data[i]).collect();
        self.record(Op::Permute { input: a, gather }, shape, data)
    }

    /// Reverse sweep from a one-element `loss`. Afterwards every
    /// requires-grad node carries `d loss / d node` in its grad slot
    /// (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].value.grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.data.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                match op {
                    ElementwiseOp::Add => {
                        self.accumulate(grads, *a, |d| add_into(d, g));
                        self.accumulate(grads, *b, |d| add_into(d, g));
                    }
                    ElementwiseOp::Sub => {
                        self.accumulate(grads, *a, |d| add_into(d, g));
                        self.accumulate(grads, *b, |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                        });
                    }
                    _ => {
                        self.accumulate(grads, *a, |d| {
                            for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                                *d += g * y;
                            }
                        });
                        self.accumulate(grads, *b, |d| {
                            for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                                *d += g * x;
                            }
                        });
                    }
                }
            }
            Op::Unary(op, a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += match op {
                            ElementwiseOp::Neg => -g[i],
                            ElementwiseOp::LogClamped => {
                                if x[i] > LOG_CLAMP {
                                    g[i] / x[i]
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Exp => g[i] * out[i],
                            _ => {
                                if x[i] > 0.0 {
                                    g[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k)
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Permute { input, gather } => self.accumulate(grads, *input, |d| {
                for (&i, &gi) in gather.iter().zip(g) {
                    d[i] += gi;
                }
            }),
            Op::Reduce {
                op,
                input,
                index_map,
                count,
                argmax,
            } => {
                self.accumulate(grads, *input, |d| match op {
                    ReduceOp::Sum => {
                        for (d, &o) in d.iter_mut().zip(index_map) {
                            *d += g[o];
                        }
                    }
                    ReduceOp::Mean => {
                        let inv = 1.0 / *count as f64;
                        for (d, &o) in d.iter_mut().zip(index_map) {
                            *d += g[o] * inv;
                        }
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            d[i] += g[o];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                if self.requires_grad(*bias) {
                    self.accumulate(grads, *bias, |d| nn::conv_backward_bias(g, geom, d));
                }
                if self.requires_grad(*weight) {
                    self.accumulate(grads, *weight, |d| {
                        nn::conv_backward_weight(g, cols, geom, d)
                    });
                }
                if self.requires_grad(*x) {
                    let w = &self.value(*weight).data;
                    self.accumulate(grads, *x, |d| nn::conv_backward_input(g, w, geom, d));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += if x[i] >= 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::SoftmaxChannel(a) => {
                let c = node.value.shape[0];
                self.accumulate(grads, *a, |d| nn::softmax_columns_backward(out, g, c, d));
            }
            Op::PadConcat(inputs) => {
                let (h_max, w_max) = (node.value.shape[1], node.value.shape[2]);
                let plane = h_max * w_max;
                let mut c_off = 0;
                for &v in inputs {
                    let s = self.value(v).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (top, left) = pad_offsets(h, w, h_max, w_max);
                    self.accumulate(grads, v, |d| {
                        for ci in 0..c {
                            for y in 0..h {
                                let src = (c_off + ci) * plane + (y + top) * w_max + left;
                                let dst = (ci * h + y) * w;
                                add_into(&mut d[dst..dst + w], &g[src..src + w]);
                            }
                        }
                    });
                    c_off += c;
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.requires_grad(target) {
            return;
        }
        let slot = &mut grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.data.len()]);
        f(buf);
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Top/left offsets that center an h×w map inside h_max×w_max, leaving the
/// odd extra row/column at the bottom/right.
pub(crate) fn pad_offsets(h: usize, w: usize, h_max: usize, w_max: usize) -> (usize, usize) {
    ((h_max - h) / 2, (w_max - w) / 2)
}

fn reduction_index_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    // stride of each kept axis in the output layout
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if !reduced[d] {
            out_stride[d] = acc;
            acc *= shape[d];
        }
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
