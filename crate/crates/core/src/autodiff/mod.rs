//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied to its variables. Calling
//! [`Graph::backward`] walks the tape once in reverse and consumes it; build a
//! fresh graph for the next step.

pub mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;

pub use kernels::MaskType;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ensure_finite, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: `(grad_out, inputs, output) -> grad per input`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Every primitive the engine knows, with its static attributes.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
    /// `max(x, floor)`.
    ClampMin(f64),
    /// Inputs: `x [Cin,H,W]`, `w [Cout,Cin,k,k]`, `b [Cout]`; stride 1.
    Conv2d { padding: usize },
    /// Inputs: `x [Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`, `b [Cout]`; "same" padding.
    MaskedConv3d { mask: MaskType },
    /// `[C,H,W] -> [C]`.
    GlobalAvgPool,
    SumAll,
    MeanAll,
    /// Reduces (and removes) one axis.
    SumAxis(usize),
    MeanAxis(usize),
    Softmax(usize),
    /// Concatenation along axis 0.
    Concat,
    /// Slice along axis 0.
    Narrow { start: usize, len: usize },
    /// Gather along axis 0.
    IndexSelect(Vec<usize>),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// `x [C, ...] * s [C]` broadcast over trailing axes.
    ScaleChannels,
    /// Per-channel valid correlation with a fixed kernel.
    Filter2dValid(Tensor),
    AvgPool2,
    /// `x [Q, N...]` -> `[N...]`, picking `x[idx[j], j]`.
    PickAxis0(Vec<usize>),
    /// Identity forward, zero gradient.
    Detach,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MulScalar(_) => "mul_scalar",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaskedConv3d { .. } => "masked_conv3d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::SumAll => "sum",
            Primitive::MeanAll => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::Softmax(_) => "softmax",
            Primitive::Concat => "concat",
            Primitive::Narrow { .. } => "narrow",
            Primitive::IndexSelect(_) => "index_select",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::ScaleChannels => "scale_channels",
            Primitive::Filter2dValid(_) => "filter2d_valid",
            Primitive::AvgPool2 => "avg_pool2",
            Primitive::PickAxis0(_) => "pick_axis0",
            Primitive::Detach => "detach",
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable (zeros if unreachable).
    pub fn wrt(&self, v: Var) -> Tensor {
        self.by_node[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient for a bound parameter; zeros if the loss does not reach it.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, i)| self.wrt(Var(i)))
    }

    /// All bound parameters and their gradients, keyed by name.
    pub fn into_param_map(self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, i)| (n.clone(), self.wrt(Var(*i))))
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), false, None)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), true, None)
    }

    /// Binds a trainable parameter from `store` as a gradient leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&(_, i)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(Var(i));
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(t);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// The backward rule is stored only when some input requires a gradient.
    pub fn custom(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        ensure_finite(op, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, inputs.iter().map(|v| v.0).collect(), rg, Some(backward)))
    }

    /// Applies a primitive by identifier.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let op = prim.name();
        let arity = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::ScaleChannels => 2,
            Primitive::Conv2d { .. } | Primitive::MaskedConv3d { .. } => 3,
            Primitive::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err(op, format!("expected {arity} inputs, got {}", inputs.len())));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, backward) = forward(prim, &vals)?;
        self.custom(op, inputs, value, backward)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&Primitive::Div, &[a, b])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(&Primitive::AddScalar(s), &[a])
    }
    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(&Primitive::MulScalar(s), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(&Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(&Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(&Primitive::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(&Primitive::Relu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(&Primitive::Softplus, &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(&Primitive::ClampMin(floor), &[a])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        self.apply(&Primitive::Conv2d { padding }, &[x, w, b])
    }
    pub fn masked_conv3d(&mut self, x: Var, w: Var, b: Var, mask: MaskType) -> Result<Var> {
        self.apply(&Primitive::MaskedConv3d { mask }, &[x, w, b])
    }
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(&Primitive::GlobalAvgPool, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(&Primitive::SumAll, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(&Primitive::MeanAll, &[x])
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&Primitive::SumAxis(axis), &[x])
    }
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&Primitive::MeanAxis(axis), &[x])
    }
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&Primitive::Softmax(axis), &[x])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(&Primitive::Concat, parts)
    }
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(&Primitive::Narrow { start, len }, &[x])
    }
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(&Primitive::IndexSelect(indices.to_vec()), &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(&Primitive::Reshape(shape.to_vec()), &[x])
    }
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(&Primitive::Permute(perm.to_vec()), &[x])
    }
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(&Primitive::ScaleChannels, &[x, s])
    }
    pub fn filter2d_valid(&mut self, x: Var, kernel: &Tensor) -> Result<Var> {
        self.apply(&Primitive::Filter2dValid(kernel.clone()), &[x])
    }
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(&Primitive::AvgPool2, &[x])
    }
    pub fn pick_axis0(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(&Primitive::PickAxis0(indices.to_vec()), &[x])
    }
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.apply(&Primitive::Detach, &[x])
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = node.backward.as_ref() {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let gin = bw(&g, &inputs, &node.value)?;
                for (&j, gj) in node.inputs.iter().zip(gin) {
                    if !self.nodes[j].requires_grad {
                        continue;
                    }
                    if gj.shape() != self.nodes[j].value.shape() {
                        return Err(shape_err(
                            "backward",
                            format!("gradient {:?} for input {:?}", gj.shape(), self.nodes[j].value.shape()),
                        ));
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gj),
                        slot => *slot = Some(gj),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for node in &mut self.nodes {
            node.backward = None;
        }
        Ok(Gradients {
            by_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }
}

fn bw(f: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>> + 'static) -> BackwardFn {
    Box::new(f)
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<(Tensor, BackwardFn)> {
    let op = prim.name();
    Ok(match prim {
        Primitive::Add => (
            x[0].zip_map(x[1], op, |a, b| a + b)?,
            bw(|g, _, _| Ok(vec![g.clone(), g.clone()])),
        ),
        Primitive::Sub => (
            x[0].zip_map(x[1], op, |a, b| a - b)?,
            bw(|g, _, _| Ok(vec![g.clone(), g.map(|v| -v)])),
        ),
        Primitive::Mul => (
            x[0].zip_map(x[1], op, |a, b| a * b)?,
            bw(|g, i, _| {
                Ok(vec![
                    g.zip_map(i[1], "mul", |g, b| g * b)?,
                    g.zip_map(i[0], "mul", |g, a| g * a)?,
                ])
            }),
        ),
        Primitive::Div => (
            x[0].zip_map(x[1], op, |a, b| a / b)?,
            bw(|g, i, out| {
                Ok(vec![
                    g.zip_map(i[1], "div", |g, b| g / b)?,
                    g.zip_map(i[1], "div", |g, b| g / b)?
                        .zip_map(out, "div", |gb, o| -gb * o)?,
                ])
            }),
        ),
        &Primitive::AddScalar(s) => (x[0].map(|v| v + s), bw(|g, _, _| Ok(vec![g.clone()]))),
        &Primitive::MulScalar(s) => (
            x[0].map(|v| v * s),
            bw(move |g, _, _| Ok(vec![g.map(|v| v * s)])),
        ),
        Primitive::Exp => (
            x[0].map(f64::exp),
            bw(|g, _, out| Ok(vec![g.zip_map(out, "exp", |g, o| g * o)?])),
        ),
        Primitive::Log => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(Error::NonFinite { op });
            }
            (
                x[0].map(f64::ln),
                bw(|g, i, _| Ok(vec![g.zip_map(i[0], "log", |g, a| g / a)?])),
            )
        }
        Primitive::Sigmoid => (
            x[0].map(sigmoid),
            bw(|g, _, out| Ok(vec![g.zip_map(out, "sigmoid", |g, s| g * s * (1.0 - s))?])),
        ),
        Primitive::Relu => (
            x[0].map(|v| v.max(0.0)),
            bw(|g, i, _| Ok(vec![g.zip_map(i[0], "relu", |g, a| if a > 0.0 { g } else { 0.0 })?])),
        ),
        Primitive::Softplus => (
            x[0].map(softplus),
            bw(|g, i, _| Ok(vec![g.zip_map(i[0], "softplus", |g, a| g * sigmoid(a))?])),
        ),
        &Primitive::ClampMin(floor) => (
            x[0].map(|v| v.max(floor)),
            bw(move |g, i, _| {
                Ok(vec![g.zip_map(i[0], "clamp_min", |g, a| if a > floor { g } else { 0.0 })?])
            }),
        ),
        &Primitive::Conv2d { padding } => (
            kernels::conv2d_forward(x[0], x[1], x[2], padding)?,
            bw(move |g, i, _| Ok(kernels::conv2d_backward(i[0], i[1], i[2], padding, g)?.to_vec())),
        ),
        &Primitive::MaskedConv3d { mask } => (
            kernels::masked_conv3d_forward(x[0], x[1], x[2], mask)?,
            bw(move |g, i, _| Ok(kernels::masked_conv3d_backward(i[0], i[1], i[2], mask, g)?.to_vec())),
        ),
        Primitive::GlobalAvgPool => {
            if x[0].ndim() != 3 {
                return Err(shape_err(op, format!("expected [C,H,W], got {:?}", x[0].shape())));
            }
            let c = x[0].shape()[0];
            let hw = x[0].numel() / c;
            let out = (0..c)
                .map(|ch| x[0].data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            (
                Tensor::new(&[c], out)?,
                bw(move |g, i, _| {
                    let data = (0..c * hw).map(|k| g.data()[k / hw] / hw as f64).collect();
                    Ok(vec![Tensor::new(i[0].shape(), data)?])
                }),
            )
        }
        Primitive::SumAll | Primitive::MeanAll => {
            let n = x[0].numel() as f64;
            let scale = if matches!(prim, Primitive::MeanAll) { 1.0 / n } else { 1.0 };
            (
                Tensor::scalar(x[0].sum() * scale),
                bw(move |g, i, _| Ok(vec![Tensor::full(i[0].shape(), g.item() * scale)])),
            )
        }
        &Primitive::SumAxis(axis) | &Primitive::MeanAxis(axis) => {
            let (outer, len, inner) = axis_split(op, x[0].shape(), axis)?;
            let scale = if matches!(prim, Primitive::MeanAxis(_)) { 1.0 / len as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for k in 0..inner {
                        out[o * inner + k] += x[0].data()[(o * len + l) * inner + k];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            (
                Tensor::new(&removed_axis(x[0].shape(), axis), out)?,
                bw(move |g, i, _| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                gx[(o * len + l) * inner + k] = g.data()[o * inner + k] * scale;
                            }
                        }
                    }
                    Ok(vec![Tensor::new(i[0].shape(), gx)?])
                }),
            )
        }
        &Primitive::Softmax(axis) => {
            let (outer, len, inner) = axis_split(op, x[0].shape(), axis)?;
            let xd = x[0].data();
            let mut out = vec![0.0; xd.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + k;
                    let m = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..len).map(|l| (xd[at(l)] - m).exp()).sum();
                    for l in 0..len {
                        out[at(l)] = (xd[at(l)] - m).exp() / z;
                    }
                }
            }
            (
                Tensor::new(x[0].shape(), out)?,
                bw(move |g, _, y| {
                    let (gd, yd) = (g.data(), y.data());
                    let mut gx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let dot: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                    Ok(vec![Tensor::new(y.shape(), gx)?])
                }),
            )
        }
        Primitive::Concat => {
            let value = Tensor::concat(x)?;
            let sizes: Vec<usize> = x.iter().map(|t| t.shape()[0]).collect();
            (
                value,
                bw(move |g, _, _| {
                    let mut start = 0;
                    sizes
                        .iter()
                        .map(|&s| {
                            let part = g.narrow(start, s);
                            start += s;
                            part
                        })
                        .collect()
                }),
            )
        }
        &Primitive::Narrow { start, len } => (
            x[0].narrow(start, len)?,
            bw(move |g, i, _| {
                let inner = i[0].numel() / i[0].shape()[0];
                let mut gx = Tensor::zeros(i[0].shape());
                gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                Ok(vec![gx])
            }),
        ),
        Primitive::IndexSelect(indices) => {
            let idx = indices.clone();
            (
                x[0].index_select(indices)?,
                bw(move |g, i, _| {
                    let inner = i[0].numel() / i[0].shape()[0];
                    let mut gx = Tensor::zeros(i[0].shape());
                    for (k, &src) in idx.iter().enumerate() {
                        let dst = &mut gx.data_mut()[src * inner..(src + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                            *d += s;
                        }
                    }
                    Ok(vec![gx])
                }),
            )
        }
        Primitive::Reshape(shape) => (
            x[0].reshape(shape)?,
            bw(|g, i, _| Ok(vec![g.reshape(i[0].shape())?])),
        ),
        Primitive::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (k, &p) in perm.iter().enumerate() {
                if p < inv.len() {
                    inv[p] = k;
                }
            }
            (x[0].permute(perm)?, bw(move |g, _, _| Ok(vec![g.permute(&inv)?])))
        }
        Primitive::ScaleChannels => {
            let c = x[0].shape()[0];
            if x[1].shape() != [c] {
                return Err(shape_err(op, format!("{:?} scaled by {:?}", x[0].shape(), x[1].shape())));
            }
            let inner = x[0].numel() / c;
            let out = x[0]
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| v * x[1].data()[k / inner])
                .collect();
            (
                Tensor::new(x[0].shape(), out)?,
                bw(move |g, i, _| {
                    let gx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| gv * i[1].data()[k / inner])
                        .collect();
                    let mut gs = vec![0.0; c];
                    for (k, (&gv, &xv)) in g.data().iter().zip(i[0].data()).enumerate() {
                        gs[k / inner] += gv * xv;
                    }
                    Ok(vec![Tensor::new(i[0].shape(), gx)?, Tensor::new(&[c], gs)?])
                }),
            )
        }
        Primitive::Filter2dValid(kernel) => {
            let k = kernel.clone();
            (
                kernels::filter2d_valid(x[0], kernel)?,
                bw(move |g, i, _| Ok(vec![kernels::filter2d_valid_backward(i[0].shape(), &k, g)?])),
            )
        }
        Primitive::AvgPool2 => (
            kernels::avg_pool2(x[0])?,
            bw(|g, i, _| Ok(vec![kernels::avg_pool2_backward(i[0].shape(), g)?])),
        ),
        Primitive::PickAxis0(indices) => {
            let q = x[0].shape()[0];
            let n = x[0].numel() / q;
            if indices.len() != n || indices.iter().any(|&s| s >= q) {
                return Err(shape_err(op, format!("{} indices (< {q}) for {n} positions", indices.len())));
            }
            let out = indices.iter().enumerate().map(|(j, &s)| x[0].data()[s * n + j]).collect();
            let idx = indices.clone();
            (
                Tensor::new(&removed_axis(x[0].shape(), 0), out)?,
                bw(move |g, i, _| {
                    let mut gx = Tensor::zeros(i[0].shape());
                    for (j, &s) in idx.iter().enumerate() {
                        gx.data_mut()[s * n + j] = g.data()[j];
                    }
                    Ok(vec![gx])
                }),
            )
        }
        Primitive::Detach => (x[0].clone(), bw(|g, _, _| Ok(vec![Tensor::zeros(g.shape())]))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[1., 2.]));
        let b = g.constant(Tensor::from_slice(&[3., 4.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(a).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn conv2d_center_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data()[4], 9.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1., -2., 3.]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[4.]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let s = g.sigmoid(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("w").unwrap().item(), 0.25);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_slice(&[1., 2.]));
        store.insert("b", Tensor::from_slice(&[3.]));
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap().into_param_map();
        assert_eq!(grads["b"].data(), &[0.0]);
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_single_use() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_slice(&[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[1., 2.]));
        let b = g.constant(Tensor::from_slice(&[1., 2., 3.]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(a), Err(Error::NonFinite { op: "exp" })));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(g.log(z).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 2], vec![1., -700., 2., 0., 3., 700.]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        for k in 0..2 {
            let tot: f64 = (0..3).map(|l| v[l * 2 + k]).sum();
            assert!((tot - 1.0).abs() < 1e-12);
        }
        assert!(v.iter().all(|&p| p >= 0.0));
    }
}
