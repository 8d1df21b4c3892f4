//! Level-0 operators: the forward/backward contract, reference kernels and
//! finite-difference gradient validation.
//!
//! Every operator consumes and produces dense tensors of one element type
//! (class-id labels of the loss may be any type) and accumulates in a fixed
//! order, so repeated evaluation is bit-identical.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod pool;
pub mod reference;
pub mod shape;
pub mod softmax;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor, TensorDesc};
use crate::{DType, Error, Result};

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, reference_cases, GradCheckMode, GradCheckReport};
pub use pool::PoolKind;

/// Attribute value as it appears in model documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvAttrs {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    /// `[top, left, bottom, right]`
    pub pads: [usize; 4],
    pub dilations: [usize; 2],
}

impl ConvAttrs {
    pub fn new(kernel: [usize; 2]) -> Self {
        ConvAttrs {
            kernel,
            strides: [1, 1],
            pads: [0; 4],
            dilations: [1, 1],
        }
    }

    pub fn with_strides(mut self, strides: [usize; 2]) -> Self {
        self.strides = strides;
        self
    }

    pub fn with_pads(mut self, pads: [usize; 4]) -> Self {
        self.pads = pads;
        self
    }

    pub fn with_dilations(mut self, dilations: [usize; 2]) -> Self {
        self.dilations = dilations;
        self
    }

    /// `floor((H + padT + padB − dH·(kH−1) − 1)/sH) + 1`, per spatial axis.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ok = self.kernel.iter().chain(&self.strides).chain(&self.dilations).all(|&v| v >= 1);
        if !ok {
            return Err(Error::op("Conv", format!("kernel/strides/dilations must be >= 1: {self:?}")));
        }
        let axis = |size: usize, before: usize, after: usize, k: usize, s: usize, d: usize| {
            let span = d * (k - 1) + 1;
            let padded = size + before + after;
            if padded < span {
                None
            } else {
                Some((padded - span) / s + 1)
            }
        };
        let oh = axis(h, self.pads[0], self.pads[2], self.kernel[0], self.strides[0], self.dilations[0]);
        let ow = axis(w, self.pads[1], self.pads[3], self.kernel[1], self.strides[1], self.dilations[1]);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::op(
                "Conv",
                format!("invalid output extent for {h}x{w} input with {self:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolAttrs {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    pub pads: [usize; 4],
}

impl PoolAttrs {
    pub fn new(kernel: [usize; 2], strides: [usize; 2]) -> Self {
        PoolAttrs {
            kernel,
            strides,
            pads: [0; 4],
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let bad = self.kernel.iter().chain(&self.strides).any(|&v| v == 0)
            || self.pads[0] >= self.kernel[0]
            || self.pads[2] >= self.kernel[0]
            || self.pads[1] >= self.kernel[1]
            || self.pads[3] >= self.kernel[1];
        let ph = h + self.pads[0] + self.pads[2];
        let pw = w + self.pads[1] + self.pads[3];
        if bad || ph < self.kernel[0] || pw < self.kernel[1] {
            return Err(Error::op(
                "Pool",
                format!("invalid window {self:?} for {h}x{w} input"),
            ));
        }
        Ok((
            (ph - self.kernel[0]) / self.strides[0] + 1,
            (pw - self.kernel[1]) / self.strides[1] + 1,
        ))
    }
}

/// The supported operator subset.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `A[M,K]·B[K,N] (+ C[N])`
    Gemm,
    /// `X[N,C,H,W] ⋆ W[F,C,kH,kW] (+ b[F])`
    Conv(ConvAttrs),
    Relu,
    MaxPool(PoolAttrs),
    MedianPool(PoolAttrs),
    /// Over the last axis.
    Softmax,
    /// `(logits[N,C], labels[N]) -> (loss[1], probs[N,C])`
    CrossEntropyLoss,
    Add,
    Sub,
    Mul,
    Reshape(Vec<i64>),
    Split { axis: usize, parts: Vec<usize> },
    Concat { axis: usize },
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named shape contract of an operator instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorContract {
    pub name: String,
    pub input_descs: Vec<TensorDesc>,
    pub output_descs: Vec<TensorDesc>,
    pub attributes: BTreeMap<String, AttrValue>,
}

/// Forward and backward passes of an operator.
pub trait Operator {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>>;

    /// One gradient per input; `None` for non-differentiable inputs.
    fn backward(
        &self,
        grad_outputs: &[&Tensor],
        fwd_inputs: &[&Tensor],
        fwd_outputs: &[&Tensor],
    ) -> Result<Vec<Option<Tensor>>>;
}

fn typed<T: Element>(t: &Tensor) -> Result<&[T]> {
    t.data::<T>()
}

fn labels_of(t: &Tensor, classes: usize) -> Result<Vec<usize>> {
    t.to_f64_vec()
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::op(
                    "x-CrossEntropyLoss",
                    format!("label {v} outside [0, {classes})"),
                ))
            }
        })
        .collect()
}

impl OpKind {
    /// Name used in model documents; `x-` marks extensions beyond ONNX.
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Gemm => "Gemm",
            OpKind::Conv(_) => "Conv",
            OpKind::Relu => "Relu",
            OpKind::MaxPool(_) => "MaxPool",
            OpKind::MedianPool(_) => "x-MedianPool",
            OpKind::Softmax => "Softmax",
            OpKind::CrossEntropyLoss => "x-CrossEntropyLoss",
            OpKind::Add => "Add",
            OpKind::Sub => "Sub",
            OpKind::Mul => "Mul",
            OpKind::Reshape(_) => "Reshape",
            OpKind::Split { .. } => "Split",
            OpKind::Concat { .. } => "Concat",
        }
    }

    /// Allowed input counts.
    pub fn input_arity(&self) -> (usize, usize) {
        match self {
            OpKind::Gemm | OpKind::Conv(_) => (2, 3),
            OpKind::CrossEntropyLoss | OpKind::Add | OpKind::Sub | OpKind::Mul => (2, 2),
            OpKind::Concat { .. } => (1, usize::MAX),
            _ => (1, 1),
        }
    }

    pub fn output_count(&self) -> usize {
        match self {
            OpKind::CrossEntropyLoss => 2,
            OpKind::Split { parts, .. } => parts.len(),
            _ => 1,
        }
    }

    pub fn differentiable_inputs(&self, n_inputs: usize) -> Vec<bool> {
        (0..n_inputs)
            .map(|i| !(matches!(self, OpKind::CrossEntropyLoss) && i == 1))
            .collect()
    }

    pub fn attributes(&self) -> BTreeMap<String, AttrValue> {
        let ints = |v: &[usize]| AttrValue::Ints(v.iter().map(|&x| x as i64).collect());
        let mut m = BTreeMap::new();
        match self {
            OpKind::Conv(a) => {
                m.insert("kernel_shape".into(), ints(&a.kernel));
                m.insert("strides".into(), ints(&a.strides));
                m.insert("pads".into(), ints(&a.pads));
                m.insert("dilations".into(), ints(&a.dilations));
            }
            OpKind::MaxPool(a) | OpKind::MedianPool(a) => {
                m.insert("kernel_shape".into(), ints(&a.kernel));
                m.insert("strides".into(), ints(&a.strides));
                m.insert("pads".into(), ints(&a.pads));
            }
            OpKind::Reshape(shape) => {
                m.insert("shape".into(), AttrValue::Ints(shape.clone()));
            }
            OpKind::Split { axis, parts } => {
                m.insert("axis".into(), AttrValue::Int(*axis as i64));
                m.insert("split".into(), ints(parts));
            }
            OpKind::Concat { axis } => {
                m.insert("axis".into(), AttrValue::Int(*axis as i64));
            }
            _ => {}
        }
        m
    }

    pub fn contract(&self, input_descs: &[TensorDesc]) -> Result<OperatorContract> {
        Ok(OperatorContract {
            name: self.name().to_string(),
            input_descs: input_descs.to_vec(),
            output_descs: self.infer(input_descs)?,
            attributes: self.attributes(),
        })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::op(self.name(), msg)
    }

    /// Output descriptors for the given inputs, validating every shape rule.
    pub fn infer(&self, inputs: &[TensorDesc]) -> Result<Vec<TensorDesc>> {
        let (lo, hi) = self.input_arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(self.err(format!("expected {lo}..={hi} inputs, got {}", inputs.len())));
        }
        let dtype = inputs[0].dtype;
        for (i, d) in inputs.iter().enumerate() {
            let exempt = matches!(self, OpKind::CrossEntropyLoss) && i == 1;
            if d.dtype != dtype && !exempt {
                return Err(Error::DTypeMismatch {
                    expected: dtype,
                    got: d.dtype,
                });
            }
        }
        let desc = |shape: Vec<usize>| TensorDesc { dtype, shape };
        let s0 = &inputs[0].shape;
        Ok(match self {
            OpKind::Gemm => {
                let s1 = &inputs[1].shape;
                if s0.len() != 2 || s1.len() != 2 || s0[1] != s1[0] {
                    return Err(self.err(format!("cannot multiply {s0:?} by {s1:?}")));
                }
                if let Some(c) = inputs.get(2) {
                    if c.shape != [s1[1]] {
                        return Err(self.err(format!("bias {:?} must be [{}]", c.shape, s1[1])));
                    }
                }
                vec![desc(vec![s0[0], s1[1]])]
            }
            OpKind::Conv(a) => {
                let w = &inputs[1].shape;
                if s0.len() != 4 || w.len() != 4 || s0[1] != w[1] {
                    return Err(self.err(format!("input {s0:?} incompatible with weights {w:?}")));
                }
                if [w[2], w[3]] != a.kernel {
                    return Err(self.err(format!("kernel_shape {:?} disagrees with weights {w:?}", a.kernel)));
                }
                if let Some(b) = inputs.get(2) {
                    if b.shape != [w[0]] {
                        return Err(self.err(format!("bias {:?} must be [{}]", b.shape, w[0])));
                    }
                }
                let (oh, ow) = a.output_extent(s0[2], s0[3])?;
                vec![desc(vec![s0[0], w[0], oh, ow])]
            }
            OpKind::MaxPool(a) | OpKind::MedianPool(a) => {
                if s0.len() != 4 {
                    return Err(self.err(format!("expected NCHW input, got {s0:?}")));
                }
                let (oh, ow) = a.output_extent(s0[2], s0[3])?;
                vec![desc(vec![s0[0], s0[1], oh, ow])]
            }
            OpKind::Relu | OpKind::Softmax => {
                if s0.is_empty() {
                    return Err(self.err("rank-0 input"));
                }
                vec![desc(s0.clone())]
            }
            OpKind::CrossEntropyLoss => {
                let l = &inputs[1].shape;
                if s0.len() != 2 || l.as_slice() != [s0[0]] {
                    return Err(self.err(format!("logits {s0:?} and labels {l:?} disagree")));
                }
                vec![desc(vec![1]), desc(s0.clone())]
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                if inputs[1].shape != *s0 {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: {s0:?} vs {:?} (no broadcasting)",
                        self.name(),
                        inputs[1].shape
                    )));
                }
                vec![desc(s0.clone())]
            }
            OpKind::Reshape(target) => vec![desc(shape::resolve_reshape(s0, target)?)],
            OpKind::Split { axis, parts } => {
                if *axis >= s0.len() || parts.iter().sum::<usize>() != s0[*axis] || parts.contains(&0) {
                    return Err(self.err(format!("parts {parts:?} do not partition axis {axis} of {s0:?}")));
                }
                parts
                    .iter()
                    .map(|&p| {
                        let mut s = s0.clone();
                        s[*axis] = p;
                        desc(s)
                    })
                    .collect()
            }
            OpKind::Concat { axis } => {
                if *axis >= s0.len() {
                    return Err(self.err(format!("axis {axis} out of range for {s0:?}")));
                }
                let mut out = s0.clone();
                out[*axis] = 0;
                for d in inputs {
                    let same = d.shape.len() == s0.len()
                        && d.shape.iter().zip(s0).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !same {
                        return Err(self.err(format!("cannot join {s0:?} with {:?}", d.shape)));
                    }
                    out[*axis] += d.shape[*axis];
                }
                vec![desc(out)]
            }
        })
    }

    fn forward_t<T: Element>(&self, inputs: &[&Tensor], out_descs: &[TensorDesc]) -> Result<Vec<Tensor>> {
        let out = |i: usize, data: Vec<T>| Tensor::from_vec(out_descs[i].shape.clone(), data);
        match self {
            OpKind::Gemm => {
                let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let n = inputs[1].shape()[1];
                let bias = inputs.get(2).map(|c| typed::<T>(c)).transpose()?;
                let y = gemm::gemm_forward(typed::<T>(inputs[0])?, typed::<T>(inputs[1])?, bias, m, k, n);
                Ok(vec![out(0, y)?])
            }
            OpKind::Conv(a) => {
                let g = conv_geometry(inputs[0].shape(), inputs[1].shape(), &out_descs[0].shape);
                let bias = inputs.get(2).map(|c| typed::<T>(c)).transpose()?;
                let y = conv::conv_forward(typed::<T>(inputs[0])?, typed::<T>(inputs[1])?, bias, a, &g);
                Ok(vec![out(0, y)?])
            }
            OpKind::MaxPool(a) | OpKind::MedianPool(a) => {
                let g = pool_geometry(inputs[0].shape(), &out_descs[0].shape);
                let y = pool::pool_forward(typed::<T>(inputs[0])?, self.pool_kind(), a, &g);
                Ok(vec![out(0, y)?])
            }
            OpKind::Relu => {
                let x = typed::<T>(inputs[0])?;
                Ok(vec![out(0, x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect())?])
            }
            OpKind::Softmax => {
                let c = *inputs[0].shape().last().unwrap();
                Ok(vec![out(0, softmax::softmax(typed::<T>(inputs[0])?, c))?])
            }
            OpKind::CrossEntropyLoss => {
                let c = inputs[0].shape()[1];
                let labels = labels_of(inputs[1], c)?;
                let (loss, probs) = softmax::softmax_xent(typed::<T>(inputs[0])?, &labels, c);
                Ok(vec![out(0, vec![loss])?, out(1, probs)?])
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (x, y) = (typed::<T>(inputs[0])?, typed::<T>(inputs[1])?);
                let z: Vec<T> = match self {
                    OpKind::Add => x.iter().zip(y).map(|(&a, &b)| a + b).collect(),
                    OpKind::Sub => x.iter().zip(y).map(|(&a, &b)| a - b).collect(),
                    _ => x.iter().zip(y).map(|(&a, &b)| a * b).collect(),
                };
                Ok(vec![out(0, z)?])
            }
            OpKind::Reshape(_) => Ok(vec![inputs[0].reshape(out_descs[0].shape.clone())?]),
            OpKind::Split { axis, parts } => shape::split(inputs[0], *axis, parts),
            OpKind::Concat { axis } => Ok(vec![shape::concat(inputs, *axis)?]),
        }
    }

    fn backward_t<T: Element>(
        &self,
        grads: &[&Tensor],
        inputs: &[&Tensor],
        outputs: &[&Tensor],
    ) -> Result<Vec<Option<Tensor>>> {
        let like = |t: &Tensor, data: Vec<T>| Tensor::from_vec(t.shape().to_vec(), data).map(Some);
        let dy = typed::<T>(grads[0])?;
        match self {
            OpKind::Gemm => {
                let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let n = inputs[1].shape()[1];
                let (da, db, dc) = gemm::gemm_backward(dy, typed::<T>(inputs[0])?, typed::<T>(inputs[1])?, m, k, n);
                let mut res = vec![like(inputs[0], da)?, like(inputs[1], db)?];
                if let Some(c) = inputs.get(2) {
                    res.push(like(c, dc)?);
                }
                Ok(res)
            }
            OpKind::Conv(a) => {
                let g = conv_geometry(inputs[0].shape(), inputs[1].shape(), grads[0].shape());
                let (dx, dw, db) = conv::conv_backward(dy, typed::<T>(inputs[0])?, typed::<T>(inputs[1])?, a, &g);
                let mut res = vec![like(inputs[0], dx)?, like(inputs[1], dw)?];
                if let Some(b) = inputs.get(2) {
                    res.push(like(b, db)?);
                }
                Ok(res)
            }
            OpKind::MaxPool(a) | OpKind::MedianPool(a) => {
                let g = pool_geometry(inputs[0].shape(), grads[0].shape());
                let dx = pool::pool_backward(dy, typed::<T>(inputs[0])?, self.pool_kind(), a, &g);
                Ok(vec![like(inputs[0], dx)?])
            }
            OpKind::Relu => {
                let x = typed::<T>(inputs[0])?;
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                Ok(vec![like(inputs[0], dx)?])
            }
            OpKind::Softmax => {
                let c = *inputs[0].shape().last().unwrap();
                let dx = softmax::softmax_backward(dy, typed::<T>(outputs[0])?, c);
                Ok(vec![like(inputs[0], dx)?])
            }
            OpKind::CrossEntropyLoss => {
                let c = inputs[0].shape()[1];
                let labels = labels_of(inputs[1], c)?;
                let probs = typed::<T>(outputs[1])?;
                let mut dx = softmax::softmax_xent_backward(dy[0], probs, &labels, c);
                if let Some(dp) = grads.get(1) {
                    let dp = typed::<T>(dp)?;
                    if dp.iter().any(|&v| v != T::zero()) {
                        let extra = softmax::softmax_backward(dp, probs, c);
                        for (d, e) in dx.iter_mut().zip(extra) {
                            *d += e;
                        }
                    }
                }
                Ok(vec![like(inputs[0], dx)?, None])
            }
            OpKind::Add => Ok(vec![Some(grads[0].clone()), Some(grads[0].clone())]),
            OpKind::Sub => {
                let neg: Vec<T> = dy.iter().map(|&d| -d).collect();
                Ok(vec![Some(grads[0].clone()), like(inputs[1], neg)?])
            }
            OpKind::Mul => {
                let (x, y) = (typed::<T>(inputs[0])?, typed::<T>(inputs[1])?);
                let dx = dy.iter().zip(y).map(|(&d, &b)| d * b).collect();
                let dyy = dy.iter().zip(x).map(|(&d, &a)| d * a).collect();
                Ok(vec![like(inputs[0], dx)?, like(inputs[1], dyy)?])
            }
            OpKind::Reshape(_) => Ok(vec![Some(grads[0].reshape(inputs[0].shape().to_vec())?)]),
            OpKind::Split { axis, .. } => Ok(vec![Some(shape::concat(grads, *axis)?)]),
            OpKind::Concat { axis } => {
                let parts: Vec<usize> = inputs.iter().map(|t| t.shape()[*axis]).collect();
                Ok(shape::split(grads[0], *axis, &parts)?.into_iter().map(Some).collect())
            }
        }
    }

    fn pool_kind(&self) -> PoolKind {
        match self {
            OpKind::MedianPool(_) => PoolKind::Median,
            _ => PoolKind::Max,
        }
    }
}

pub(crate) fn conv_geometry(x: &[usize], w: &[usize], y: &[usize]) -> ConvGeometry {
    ConvGeometry {
        n: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        f: w[0],
        kh: w[2],
        kw: w[3],
        oh: y[2],
        ow: y[3],
    }
}

fn pool_geometry(x: &[usize], y: &[usize]) -> pool::PoolGeometry {
    pool::PoolGeometry {
        planes: x[0] * x[1],
        h: x[2],
        w: x[3],
        oh: y[2],
        ow: y[3],
    }
}

impl Operator for OpKind {
    fn name(&self) -> &'static str {
        OpKind::name(self)
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let descs: Vec<TensorDesc> = inputs.iter().map(|t| t.desc()).collect();
        let out_descs = self.infer(&descs)?;
        match descs[0].dtype {
            DType::F32 => self.forward_t::<f32>(inputs, &out_descs),
            DType::F64 => self.forward_t::<f64>(inputs, &out_descs),
        }
    }

    fn backward(
        &self,
        grad_outputs: &[&Tensor],
        fwd_inputs: &[&Tensor],
        fwd_outputs: &[&Tensor],
    ) -> Result<Vec<Option<Tensor>>> {
        if grad_outputs.len() != self.output_count() {
            return Err(self.err(format!(
                "expected {} output gradients, got {}",
                self.output_count(),
                grad_outputs.len()
            )));
        }
        for (g, o) in grad_outputs.iter().zip(fwd_outputs) {
            if g.shape() != o.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: gradient {:?} vs output {:?}",
                    self.name(),
                    g.shape(),
                    o.shape()
                )));
            }
        }
        match fwd_inputs[0].dtype() {
            DType::F32 => self.backward_t::<f32>(grad_outputs, fwd_inputs, fwd_outputs),
            DType::F64 => self.backward_t::<f64>(grad_outputs, fwd_inputs, fwd_outputs),
        }
    }
}
