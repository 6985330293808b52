//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every recorded operation appends a node holding its kind, its input
//! node ids and the activations its backward rule needs. Node order is the
//! forward execution order, so a reverse sweep is a valid topological
//! traversal. Gradients reaching a node from several consumers are summed.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, Conv2dGeometry, LayerNormSaved};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Broadcast pattern of a binary op: equal shapes, or one side scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Binary {
        kind: BinaryKind,
        bcast: Broadcast,
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
    },
    Scale(T),
    AddBias {
        axis: usize,
    },
    MatMul {
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
    },
    Sigmoid {
        out: Arc<Tensor<T>>,
    },
    Gelu {
        x: Arc<Tensor<T>>,
    },
    Relu {
        x: Arc<Tensor<T>>,
    },
    Log {
        x: Arc<Tensor<T>>,
    },
    Conv2d {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        geom: Conv2dGeometry,
    },
    Depthwise {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        geom: Conv2dGeometry,
    },
    Softmax {
        out: Arc<Tensor<T>>,
        scale: T,
    },
    LayerNorm {
        saved: LayerNormSaved<T>,
        gain: Arc<Tensor<T>>,
    },
    Bilinear {
        in_shape: Vec<usize>,
    },
    Concat {
        axis: usize,
        extents: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Sum {
        in_shape: Vec<usize>,
    },
    Mean {
        in_shape: Vec<usize>,
    },
    MaxPool2 {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    BceLogits {
        z: Arc<Tensor<T>>,
        y: Arc<Tensor<T>>,
    },
    FocalLogits {
        z: Arc<Tensor<T>>,
        y: Arc<Tensor<T>>,
        alpha: T,
        gamma: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Binary { .. } => "binary",
            Op::Scale(_) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Log { .. } => "log",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Softmax { .. } => "softmax_scaled",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::FocalLogits { .. } => "focal_with_logits",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
}

/// Records differentiable operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value produced on a tape. Untracked values (constants, or anything on an
/// inference tape) carry no node.
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    node: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing: forward values only.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kinds of the recorded operations, in forward order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push_node(&self, op: Op<T>, inputs: Vec<Option<usize>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs });
        nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let node = (self.recording && requires_grad)
            .then(|| self.push_node(Op::Leaf { param: None }, Vec::new()));
        Var {
            tape: self,
            node,
            value: Arc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Bring a stored parameter onto the tape without copying its buffer.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        let node = (self.recording && p.requires_grad)
            .then(|| self.push_node(Op::Leaf { param: Some(id) }, Vec::new()));
        Var {
            tape: self,
            node,
            value: p.shared(),
        }
    }

    fn record<'t>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: impl Into<Arc<Tensor<T>>>,
        op: impl FnOnce() -> Op<T>,
    ) -> Var<'t, T> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = (self.recording && ids.iter().any(Option::is_some))
            .then(|| self.push_node(op(), ids));
        Var {
            tape: self,
            node,
            value: value.into(),
        }
    }

    /// Concatenate along `axis`.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value.as_ref()).collect();
        let out = kernels::concat(&values, axis)?;
        let refs: Vec<&Var<'t, T>> = xs.iter().collect();
        let extents = xs.iter().map(|v| v.value.shape()[axis]).collect();
        Ok(self.record(&refs, out, || Op::Concat { axis, extents }))
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::usage("loss does not depend on any tracked tensor"))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        let mut leaves = BTreeMap::new();
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf { param } = node.op {
                if let Some(pid) = param {
                    match params.get_mut(&pid) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            params.insert(pid, g.clone());
                        }
                    }
                }
                leaves.insert(id, g);
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward_op(&node.op, &g, &need);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(target), Some(ig)) = (slot, ig) {
                    match grads[*target].as_mut() {
                        Some(acc) => acc.add_assign(&ig),
                        None => grads[*target] = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf variable, if it was reached.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }

    /// Gradient of a parameter, summed over all its uses on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }
}

fn reduce_to_scalar<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, t.sum())
}

fn backward_op<T: Scalar>(op: &Op<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
    let need_at = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::Binary { kind, bcast, a, b } => {
            let (ga_full, gb_full) = match kind {
                BinaryKind::Add => (g.clone(), g.clone()),
                BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                BinaryKind::Mul => {
                    let bv = |i: usize| if *bcast == Broadcast::RhsScalar { b.data()[0] } else { b.data()[i] };
                    let av = |i: usize| if *bcast == Broadcast::LhsScalar { a.data()[0] } else { a.data()[i] };
                    let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * bv(i));
                    let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * av(i));
                    (ga, gb)
                }
            };
            let ga = need_at(0).then(|| match bcast {
                Broadcast::LhsScalar => reduce_to_scalar(&ga_full, a.shape()),
                _ => ga_full,
            });
            let gb = need_at(1).then(|| match bcast {
                Broadcast::RhsScalar => reduce_to_scalar(&gb_full, b.shape()),
                _ => gb_full,
            });
            vec![ga, gb]
        }
        Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Op::AddBias { axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let extent = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let gb = need_at(1).then(|| {
                let mut db = vec![T::zero(); extent];
                for o in 0..outer {
                    for (a, acc) in db.iter_mut().enumerate() {
                        let base = (o * extent + a) * inner;
                        *acc += g.data()[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                Tensor::new(&[extent], db).unwrap()
            });
            vec![need_at(0).then(|| g.clone()), gb]
        }
        Op::MatMul { a, b } => kernels::matmul_backward(g, a, b, [need_at(0), need_at(1)]).into(),
        Op::Sigmoid { out } => vec![Some(Tensor::from_fn(g.shape(), |i| {
            let s = out.data()[i];
            g.data()[i] * s * (T::one() - s)
        }))],
        Op::Gelu { x } => vec![Some(Tensor::from_fn(g.shape(), |i| {
            g.data()[i] * kernels::gelu_grad(x.data()[i])
        }))],
        Op::Relu { x } => vec![Some(Tensor::from_fn(g.shape(), |i| {
            if x.data()[i] > T::zero() {
                g.data()[i]
            } else {
                T::zero()
            }
        }))],
        Op::Log { x } => vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] / x.data()[i]))],
        Op::Conv2d { x, w, geom } => {
            kernels::conv2d_backward(g, x, w, *geom, [need_at(0), need_at(1), need_at(2)]).into()
        }
        Op::Depthwise { x, w, geom } => {
            kernels::depthwise_conv2d_backward(g, x, w, *geom, [need_at(0), need_at(1), need_at(2)])
                .into()
        }
        Op::Softmax { out, scale } => vec![Some(kernels::softmax_backward(g, out, *scale))],
        Op::LayerNorm { saved, gain } => {
            kernels::layer_norm_backward(g, saved, gain, [need_at(0), need_at(1), need_at(2)]).into()
        }
        Op::Bilinear { in_shape } => vec![Some(kernels::bilinear_backward(g, in_shape))],
        Op::Concat { axis, extents } => {
            let mut start = 0;
            extents
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let s = start;
                    start += len;
                    need_at(i).then(|| kernels::narrow(g, *axis, s, len).unwrap())
                })
                .collect()
        }
        Op::Narrow {
            axis,
            start,
            in_shape,
        } => vec![Some(kernels::narrow_backward(g, in_shape, *axis, *start))],
        Op::Reshape { in_shape } => vec![Some(g.clone().reshaped(in_shape).unwrap())],
        Op::Permute { perm } => {
            let inv = kernels::inverse_permutation(perm);
            vec![Some(kernels::permute(g, &inv).unwrap())]
        }
        Op::Sum { in_shape } => vec![Some(Tensor::full(in_shape, g.item()))],
        Op::Mean { in_shape } => {
            let n: usize = in_shape.iter().product();
            vec![Some(Tensor::full(in_shape, g.item() / T::lit(n as f64)))]
        }
        Op::MaxPool2 { argmax, in_shape } => {
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                dx[src] += gv;
            }
            vec![Some(Tensor::new(in_shape, dx).unwrap())]
        }
        Op::BceLogits { z, y } => {
            let d = kernels::bce_with_logits_grad(z.data(), y.data());
            let gs = g.item();
            vec![Some(Tensor::new(z.shape(), d.into_iter().map(|v| v * gs).collect()).unwrap())]
        }
        Op::FocalLogits { z, y, alpha, gamma } => {
            let d = kernels::focal_with_logits_grad(z.data(), y.data(), *alpha, *gamma);
            let gs = g.item();
            vec![Some(Tensor::new(z.shape(), d.into_iter().map(|v| v * gs).collect()).unwrap())]
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Whether gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
        }
    }

    fn binary(&self, other: &Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let (a, b) = (&self.value, &other.value);
        let bcast = if a.shape() == b.shape() {
            Broadcast::Same
        } else if b.numel() == 1 {
            Broadcast::RhsScalar
        } else if a.numel() == 1 {
            Broadcast::LhsScalar
        } else {
            return Err(Error::dim(format!(
                "{kind:?} of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        let shape = if bcast == Broadcast::LhsScalar { b.shape() } else { a.shape() };
        let av = |i: usize| if bcast == Broadcast::LhsScalar { a.data()[0] } else { a.data()[i] };
        let bv = |i: usize| if bcast == Broadcast::RhsScalar { b.data()[0] } else { b.data()[i] };
        let out = Tensor::from_fn(shape, |i| match kind {
            BinaryKind::Add => av(i) + bv(i),
            BinaryKind::Sub => av(i) - bv(i),
            BinaryKind::Mul => av(i) * bv(i),
        });
        Ok(self.tape.record(&[self, other], out, || Op::Binary {
            kind,
            bcast,
            a: Arc::clone(a),
            b: Arc::clone(b),
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let out = self.value.map(|v| v * factor);
        self.tape.record(&[self], out, || Op::Scale(factor))
    }

    /// Add a vector `bias` broadcast along every axis except `axis`.
    pub fn add_bias(&self, bias: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.value.shape();
        if axis >= shape.len() || bias.value.numel() != shape[axis] {
            return Err(Error::dim(format!(
                "bias {:?} along axis {axis} of {:?}",
                bias.shape(),
                shape
            )));
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let b = bias.value.data();
        let out = Tensor::from_fn(shape, |i| self.value.data()[i] + b[(i / inner) % extent]);
        Ok(self.tape.record(&[self, bias], out, || Op::AddBias { axis }))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = kernels::matmul(&self.value, &other.value)?;
        Ok(self.tape.record(&[self, other], out, || Op::MatMul {
            a: Arc::clone(&self.value),
            b: Arc::clone(&other.value),
        }))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = Arc::new(self.value.map(kernels::sigmoid));
        let saved = Arc::clone(&out);
        self.tape.record(&[self], out, || Op::Sigmoid { out: saved })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let out = self.value.map(kernels::gelu);
        self.tape.record(&[self], out, || Op::Gelu {
            x: Arc::clone(&self.value),
        })
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self.value.map(|v| v.max(T::zero()));
        self.tape.record(&[self], out, || Op::Relu {
            x: Arc::clone(&self.value),
        })
    }

    /// Natural logarithm; non-positive entries are a domain error.
    pub fn log(&self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value.map(|v| v.ln());
        Ok(self.tape.record(&[self], out, || Op::Log {
            x: Arc::clone(&self.value),
        }))
    }

    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        geom: Conv2dGeometry,
    ) -> Result<Var<'t, T>> {
        let out = kernels::conv2d(&self.value, &weight.value, bias.map(|b| b.value.as_ref()), geom)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(&inputs, out, || Op::Conv2d {
            x: Arc::clone(&self.value),
            w: Arc::clone(&weight.value),
            geom,
        }))
    }

    pub fn depthwise_conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        geom: Conv2dGeometry,
    ) -> Result<Var<'t, T>> {
        let out = kernels::depthwise_conv2d(&self.value, &weight.value, bias.map(|b| b.value.as_ref()), geom)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(&inputs, out, || Op::Depthwise {
            x: Arc::clone(&self.value),
            w: Arc::clone(&weight.value),
            geom,
        }))
    }

    pub fn softmax_scaled(&self, scale: T) -> Result<Var<'t, T>> {
        let out = Arc::new(kernels::softmax_scaled(&self.value, scale)?);
        let saved = Arc::clone(&out);
        Ok(self.tape.record(&[self], out, || Op::Softmax { out: saved, scale }))
    }

    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (out, saved) = kernels::layer_norm_saved(&self.value, &gain.value, &bias.value, eps)?;
        Ok(self.tape.record(&[self, gain, bias], out, || Op::LayerNorm {
            saved,
            gain: Arc::clone(&gain.value),
        }))
    }

    pub fn bilinear_resize(&self, height: usize, width: usize) -> Result<Var<'t, T>> {
        if self.shape().len() == 3 && self.shape()[1] == height && self.shape()[2] == width {
            return Ok(self.clone());
        }
        let out = kernels::bilinear_resize(&self.value, height, width)?;
        Ok(self.tape.record(&[self], out, || Op::Bilinear {
            in_shape: self.shape().to_vec(),
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = kernels::narrow(&self.value, axis, start, len)?;
        Ok(self.tape.record(&[self], out, || Op::Narrow {
            axis,
            start,
            in_shape: self.shape().to_vec(),
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value.as_ref().clone().reshaped(shape)?;
        Ok(self.tape.record(&[self], out, || Op::Reshape {
            in_shape: self.shape().to_vec(),
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = kernels::permute(&self.value, perm)?;
        Ok(self.tape.record(&[self], out, || Op::Permute {
            perm: perm.to_vec(),
        }))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.sum());
        self.tape.record(&[self], out, || Op::Sum {
            in_shape: self.shape().to_vec(),
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.sum() / T::lit(self.value.numel() as f64));
        self.tape.record(&[self], out, || Op::Mean {
            in_shape: self.shape().to_vec(),
        })
    }

    pub fn max_pool2(&self) -> Result<Var<'t, T>> {
        let (out, argmax) = kernels::max_pool2(&self.value)?;
        Ok(self.tape.record(&[self], out, || Op::MaxPool2 {
            argmax,
            in_shape: self.shape().to_vec(),
        }))
    }

    /// Mean binary cross-entropy of these logits against `targets`.
    pub fn bce_with_logits(&self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        self.check_targets(targets)?;
        let loss = kernels::bce_with_logits(self.value.data(), targets.data());
        let y = Arc::new(targets.clone());
        Ok(self.tape.record(&[self], Tensor::scalar(loss), || Op::BceLogits {
            z: Arc::clone(&self.value),
            y,
        }))
    }

    /// Mean focal loss of these logits against `targets`.
    pub fn focal_with_logits(&self, targets: &Tensor<T>, alpha: T, gamma: T) -> Result<Var<'t, T>> {
        self.check_targets(targets)?;
        let loss = kernels::focal_with_logits(self.value.data(), targets.data(), alpha, gamma);
        let y = Arc::new(targets.clone());
        Ok(self.tape.record(&[self], Tensor::scalar(loss), || Op::FocalLogits {
            z: Arc::clone(&self.value),
            y,
            alpha,
            gamma,
        }))
    }

    fn check_targets(&self, targets: &Tensor<T>) -> Result<()> {
        if targets.shape() != self.shape() {
            return Err(Error::dim(format!(
                "logits {:?} vs targets {:?}",
                self.shape(),
                targets.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn diamond_accumulates() {
        // y = x*a + x*b  => dy/dx = a + b
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let a = x.scale(2.0);
        let b = x.scale(5.0);
        let y = a.add(&b).unwrap().sum();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[2, 2]), true);
        let y = x.matmul(&x).unwrap().sigmoid();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn log_domain_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 0.0]), true);
        assert!(matches!(x.log(), Err(Error::Domain(_))));
        let one = tape.leaf(t(&[1], &[1.0]), true);
        assert_eq!(one.log().unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn scalar_broadcast() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.leaf(t(&[1], &[2.0]), true);
        let y = x.mul(&s).unwrap().sum();
        assert_eq!(y.value().item(), 12.0);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&s).unwrap().data(), &[6.0]);
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = tape.leaf(t(&[2], &[1.0, 1.0]), true);
        assert!(x.add(&bad).is_err());
    }
}
