//! Record-on-execute tape and the differentiable operator set.
//!
//! Every backward rule is itself expressed with tape ops, so gradients are
//! ordinary [`Var`]s and can be differentiated again (needed for gradient
//! penalties). Records are appended in creation order, which is always a
//! topological order of the graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    DivScalar(usize, f64),
    AddScalar(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeom,
    },
    ConvInputGrad {
        grad_out: usize,
        weight: usize,
        geom: ConvGeom,
    },
    ConvWeightGrad {
        input: usize,
        grad_out: usize,
        geom: ConvGeom,
    },
    BroadcastChannels(usize),
    SumChannels(usize),
    LeakyRelu {
        input: usize,
        alpha: f64,
    },
    Sigmoid(usize),
    Softplus(usize),
    Ln(usize),
    Reciprocal(usize),
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    SumPool {
        input: usize,
        factor: usize,
    },
    Concat(Vec<usize>),
    SliceChannels {
        input: usize,
        start: usize,
    },
    PadChannels {
        input: usize,
        start: usize,
    },
    Sum(usize),
    ExpandScalar(usize),
    SumPerSample(usize),
    ExpandPerSample(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Conv2d { input, weight, .. } => vec![*input, *weight],
            ConvInputGrad {
                grad_out, weight, ..
            } => vec![*grad_out, *weight],
            ConvWeightGrad {
                input, grad_out, ..
            } => vec![*input, *grad_out],
            Concat(ids) => ids.clone(),
            Scale(a, _)
            | DivScalar(a, _)
            | AddScalar(a)
            | Reshape(a)
            | BroadcastChannels(a)
            | SumChannels(a)
            | Sigmoid(a)
            | Softplus(a)
            | Ln(a)
            | Reciprocal(a)
            | Sum(a)
            | ExpandScalar(a)
            | SumPerSample(a)
            | ExpandPerSample(a) => vec![*a],
            LeakyRelu { input, .. }
            | Clamp { input, .. }
            | Upsample { input, .. }
            | SumPool { input, .. }
            | SliceChannels { input, .. }
            | PadChannels { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording context. Drop it (or [`Tape::clear`]) to free
/// the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of records, including gradient records.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every record.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
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

    fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels<'t>(&'t self, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            self.check(*v)?;
        }
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat_channels(&refs)?;
        self.record(
            "concat_channels",
            out,
            Op::Concat(inputs.iter().map(|v| v.id).collect()),
        )
    }

    /// Gradients of a scalar `root` with respect to `wrt`, as differentiable
    /// vars on this tape. Inputs that `root` does not depend on get a zero
    /// constant.
    pub fn grad<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let grads = self.backprop(root)?;
        wrt.iter()
            .map(|v| {
                self.check(*v)?;
                Ok(match grads.get(v.id).copied().flatten() {
                    Some(id) => self.var(id),
                    None => self.constant(Tensor::zeros(v.value().shape())),
                })
            })
            .collect()
    }

    /// Populates gradients for every differentiable leaf that `root` depends on.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let grads = self.backprop(root)?;
        let nodes = self.nodes.borrow();
        let by_id = grads
            .iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = (*g)?;
                matches!(nodes[id].op, Op::Leaf).then(|| (id, (*nodes[g].value).clone()))
            })
            .collect();
        Ok(Gradients { by_id })
    }

    /// Reverse sweep. Returns, per record id up to `root`, the id of the record
    /// holding its accumulated gradient.
    fn backprop(&self, root: Var<'_>) -> Result<Vec<Option<usize>>> {
        self.check(root)?;
        let root_value = root.value();
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<usize>> = vec![None; root.id + 1];
        grads[root.id] = Some(self.constant(Tensor::ones(root_value.shape())).id);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires_grad || matches!(op, Op::Leaf) {
                continue;
            }
            let needs: Vec<bool> = {
                let nodes = self.nodes.borrow();
                op.inputs().iter().map(|&i| nodes[i].requires_grad).collect()
            };
            let contributions = self.vjp(&op, id, self.var(g), &needs)?;
            for (input, contribution) in contributions {
                grads[input] = Some(match grads[input] {
                    None => contribution.id,
                    Some(prev) => self.var(prev).add(contribution)?.id,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products for one record, for inputs flagged in `needs`.
    fn vjp<'t>(
        &'t self,
        op: &Op,
        out_id: usize,
        g: Var<'t>,
        needs: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let mut out = Vec::with_capacity(needs.len());
        let want = |k: usize| needs.get(k).copied().unwrap_or(false);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if want(0) {
                    out.push((a, g));
                }
                if want(1) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(0) {
                    out.push((a, g));
                }
                if want(1) {
                    out.push((b, g.neg()?));
                }
            }
            Op::Mul(a, b) => {
                if want(0) {
                    out.push((a, g.mul(self.var(b))?));
                }
                if want(1) {
                    out.push((b, g.mul(self.var(a))?));
                }
            }
            Op::Scale(a, c) => out.push((a, g.scale(c)?)),
            Op::DivScalar(a, c) => out.push((a, g.div_scalar(c)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Reshape(a) => {
                let shape = self.value_of(a).shape().to_vec();
                out.push((a, g.reshape(&shape)?));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                if want(0) {
                    let shape = self.value_of(input).shape().to_vec();
                    out.push((input, g.conv2d_input_grad(self.var(weight), geom, &shape)?));
                }
                if want(1) {
                    let shape = self.value_of(weight).shape().to_vec();
                    out.push((weight, self.var(input).conv2d_weight_grad(g, geom, &shape)?));
                }
            }
            Op::ConvInputGrad {
                grad_out,
                weight,
                geom,
            } => {
                if want(0) {
                    out.push((grad_out, g.conv2d_raw(self.var(weight), geom)?));
                }
                if want(1) {
                    let shape = self.value_of(weight).shape().to_vec();
                    out.push((weight, g.conv2d_weight_grad(self.var(grad_out), geom, &shape)?));
                }
            }
            Op::ConvWeightGrad {
                input,
                grad_out,
                geom,
            } => {
                if want(0) {
                    let shape = self.value_of(input).shape().to_vec();
                    out.push((input, self.var(grad_out).conv2d_input_grad(g, geom, &shape)?));
                }
                if want(1) {
                    out.push((grad_out, self.var(input).conv2d_raw(g, geom)?));
                }
            }
            Op::BroadcastChannels(a) => out.push((a, g.sum_channels()?)),
            Op::SumChannels(a) => {
                let shape = self.value_of(a).shape().to_vec();
                out.push((a, g.broadcast_channels(&shape)?));
            }
            Op::LeakyRelu { input, alpha } => {
                let slope = self
                    .value_of(input)
                    .map(|v| if v > 0.0 { 1.0 } else { alpha });
                out.push((input, g.mul(self.constant(slope))?));
            }
            Op::Sigmoid(a) => {
                let s = self.var(out_id);
                let ds = s.sub(s.mul(s)?)?;
                out.push((a, g.mul(ds)?));
            }
            Op::Softplus(a) => out.push((a, g.mul(self.var(a).sigmoid()?)?)),
            Op::Ln(a) => out.push((a, g.mul(self.var(a).reciprocal()?)?)),
            Op::Reciprocal(a) => {
                let r = self.var(out_id);
                out.push((a, g.mul(r.mul(r)?)?.neg()?));
            }
            Op::Clamp { input, lo, hi } => {
                let pass = self
                    .value_of(input)
                    .map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                out.push((input, g.mul(self.constant(pass))?));
            }
            Op::Upsample { input, factor } => out.push((input, g.sum_pool(factor)?)),
            Op::SumPool { input, factor } => out.push((input, g.upsample_nearest(factor)?)),
            Op::Concat(ref ids) => {
                let mut offset = 0;
                for (k, &id) in ids.iter().enumerate() {
                    let c = self.value_of(id).shape()[1];
                    if want(k) {
                        out.push((id, g.slice_channels(offset, c)?));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let total = self.value_of(input).shape()[1];
                out.push((input, g.pad_channels(start, total)?));
            }
            Op::PadChannels { input, start } => {
                let c = self.value_of(input).shape()[1];
                out.push((input, g.slice_channels(start, c)?));
            }
            Op::Sum(a) => {
                let shape = self.value_of(a).shape().to_vec();
                out.push((a, g.expand_scalar(&shape)?));
            }
            Op::ExpandScalar(a) => {
                let shape = self.value_of(a).shape().to_vec();
                out.push((a, g.sum()?.reshape(&shape)?));
            }
            Op::SumPerSample(a) => {
                let shape = self.value_of(a).shape().to_vec();
                out.push((a, g.expand_per_sample(&shape)?));
            }
            Op::ExpandPerSample(a) => out.push((a, g.sum_per_sample()?)),
        }
        Ok(out)
    }
}

/// Result of a masked mean; `empty_mask` flags a degenerate all-zero mask, in
/// which case `value` is a zero constant.
#[derive(Debug, Clone, Copy)]
pub struct MaskedMean<'t> {
    pub value: Var<'t>,
    pub empty_mask: bool,
}

// Fallible, so these stay inherent methods rather than operator impls.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Shortcut for the single value of a scalar var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_rc(self.value(), Op::Constant, false)
    }

    fn unary(self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.tape.record(name, value, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let value = a.zip_map(&b, f)?;
        self.tape.record(name, value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * c);
        self.unary("scale", v, Op::Scale(self.id, c))
    }

    /// `x / c`, correctly rounded (unlike `scale(1/c)`).
    pub fn div_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x / c);
        self.unary("div_scalar", v, Op::DivScalar(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.unary("add_scalar", v, Op::AddScalar(self.id))
    }

    /// `c - self`, e.g. `1 - M`.
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'t>> {
        self.neg()?.add_scalar(c)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.unary("reshape", v, Op::Reshape(self.id))
    }

    /// Cross-correlation with optional per-output-channel bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: ConvGeom,
    ) -> Result<Var<'t>> {
        let y = self.conv2d_raw(weight, geom)?;
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => Ok(y),
        }
    }

    fn conv2d_raw(self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        self.tape.check(weight)?;
        let v = kernels::conv2d(&self.value(), &weight.value(), geom)?;
        self.unary(
            "conv2d",
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
        )
    }

    /// Transposed convolution: the input-gradient of conv2d, with `self` as the
    /// output gradient.
    pub fn conv2d_input_grad(
        self,
        weight: Var<'t>,
        geom: ConvGeom,
        input_shape: &[usize],
    ) -> Result<Var<'t>> {
        self.tape.check(weight)?;
        let v = kernels::conv2d_input_grad(&self.value(), &weight.value(), geom, input_shape)?;
        self.unary(
            "conv2d_input_grad",
            v,
            Op::ConvInputGrad {
                grad_out: self.id,
                weight: weight.id,
                geom,
            },
        )
    }

    /// The weight-gradient of conv2d, with `self` as the conv input.
    pub fn conv2d_weight_grad(
        self,
        grad_out: Var<'t>,
        geom: ConvGeom,
        weight_shape: &[usize],
    ) -> Result<Var<'t>> {
        self.tape.check(grad_out)?;
        let v = kernels::conv2d_weight_grad(&self.value(), &grad_out.value(), geom, weight_shape)?;
        self.unary(
            "conv2d_weight_grad",
            v,
            Op::ConvWeightGrad {
                input: self.id,
                grad_out: grad_out.id,
                geom,
            },
        )
    }

    /// Adds a `[C]` bias to every position of a `[N,C,H,W]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let b = bias.broadcast_channels(&self.shape())?;
        self.add(b)
    }

    fn broadcast_channels(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = kernels::broadcast_channels(&self.value(), shape)?;
        self.unary("broadcast_channels", v, Op::BroadcastChannels(self.id))
    }

    fn sum_channels(self) -> Result<Var<'t>> {
        let v = kernels::sum_channels(&self.value())?;
        self.unary("sum_channels", v, Op::SumChannels(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, alpha: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(AutodiffError::InvalidArgument {
                op: "leaky_relu",
                reason: format!("alpha {alpha} outside [0, 1)"),
            });
        }
        let v = self.value().map(|x| if x > 0.0 { x } else { alpha * x });
        self.unary(
            "leaky_relu",
            v,
            Op::LeakyRelu {
                input: self.id,
                alpha,
            },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.value().map(sigmoid);
        self.unary("sigmoid", v, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'t>> {
        let v = self.value().map(softplus);
        self.unary("softplus", v, Op::Softplus(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::ln);
        self.unary("ln", v, Op::Ln(self.id))
    }

    pub fn reciprocal(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::recip);
        self.unary("reciprocal", v, Op::Reciprocal(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(
            "clamp",
            v,
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
        )
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let v = kernels::upsample_nearest(&self.value(), factor)?;
        self.unary(
            "upsample_nearest",
            v,
            Op::Upsample {
                input: self.id,
                factor,
            },
        )
    }

    pub fn sum_pool(self, factor: usize) -> Result<Var<'t>> {
        let v = kernels::sum_pool(&self.value(), factor)?;
        self.unary(
            "sum_pool",
            v,
            Op::SumPool {
                input: self.id,
                factor,
            },
        )
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = kernels::slice_channels(&self.value(), start, len)?;
        self.unary(
            "slice_channels",
            v,
            Op::SliceChannels {
                input: self.id,
                start,
            },
        )
    }

    fn pad_channels(self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = kernels::pad_channels(&self.value(), start, total)?;
        self.unary(
            "pad_channels",
            v,
            Op::PadChannels {
                input: self.id,
                start,
            },
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.unary("sum", v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.sum()?.div_scalar(n as f64)
    }

    fn expand_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        if value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(value.shape().to_vec()));
        }
        let v = Tensor::full(shape, value.item());
        self.unary("expand_scalar", v, Op::ExpandScalar(self.id))
    }

    /// `[N, ...] -> [N]`
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        let v = kernels::sum_per_sample(&self.value())?;
        self.unary("sum_per_sample", v, Op::SumPerSample(self.id))
    }

    pub fn mean_per_sample(self) -> Result<Var<'t>> {
        let value = self.value();
        let per = value.len() / value.shape()[0].max(1);
        self.sum_per_sample()?.div_scalar(per as f64)
    }

    /// Repeats each entry of an `[N]` var over `shape`'s trailing dims.
    pub fn expand_per_sample(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = kernels::expand_per_sample(&self.value(), shape)?;
        self.unary("expand_per_sample", v, Op::ExpandPerSample(self.id))
    }

    /// Sum over positions where `mask` is non-zero. `mask` either matches the
    /// shape of `self` or is `[N,1,H,W]` and is broadcast over channels.
    pub fn masked_sum(self, mask: &Tensor) -> Result<Var<'t>> {
        let m = self.tape.constant(expand_mask(mask, &self.shape())?);
        self.mul(m)?.sum()
    }

    /// Mean over the positions selected by `mask` (counting each channel).
    /// An empty mask yields 0 with `empty_mask` set instead of NaN.
    pub fn masked_mean(self, mask: &Tensor) -> Result<MaskedMean<'t>> {
        let expanded = expand_mask(mask, &self.shape())?;
        let count = expanded.data().iter().filter(|&&v| v != 0.0).count();
        if count == 0 {
            return Ok(MaskedMean {
                value: self.tape.scalar(0.0),
                empty_mask: true,
            });
        }
        let value = self
            .mul(self.tape.constant(expanded))?
            .sum()?
            .div_scalar(count as f64)?;
        Ok(MaskedMean {
            value,
            empty_mask: false,
        })
    }
}

/// Broadcasts a `[N,1,H,W]` mask over the channels of `shape`, or passes an
/// exactly matching mask through.
pub fn expand_mask(mask: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if mask.shape() == shape {
        return Ok(mask.clone());
    }
    let [n, c, h, w] = kernels::as4(shape)?;
    if mask.shape() != [n, 1, h, w] {
        return Err(AutodiffError::ShapeMismatch {
            op: "mask",
            left: shape.to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for s in 0..n {
        let plane = &mask.data()[s * hw..(s + 1) * hw];
        for _ in 0..c {
            out.extend_from_slice(plane);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Logistic function in the branch form that never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
