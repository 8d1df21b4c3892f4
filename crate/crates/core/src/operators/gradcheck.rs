//! Finite-difference validation of operator backward passes.
//!
//! The numerical side is always evaluated in f64 with central differences.
//! The analytic side runs at the precision of the supplied inputs, so an f32
//! check measures the f32 backward kernel against the f64 derivative.

use super::{ConvAttrs, OpKind, Operator, PoolAttrs};
use crate::tensor::{Init, TensorDesc};
use crate::{DType, Error, Result, Rng, Tensor};

/// Inputs and outputs up to this many elements get a full Jacobian check.
pub const FULL_JACOBIAN_LIMIT: usize = 64;
/// Coordinates probed per input in vector-Jacobian mode.
pub const VJP_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckMode {
    FullJacobian,
    VectorJacobian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub mode: GradCheckMode,
    /// Max relative error per input; `None` for non-differentiable inputs.
    pub per_input: Vec<Option<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().flatten().copied().fold(0.0, f64::max)
    }
}

fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / ana.abs().max(1.0)
}

fn finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} of {} values", values.iter().filter(|v| !v.is_finite()).count(), values.len())))
    }
}

/// `Σ_o <u_o, f_o(x)>` evaluated in f64.
fn contracted(op: &OpKind, inputs: &[Tensor], cot: &[Vec<f64>]) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let outs = op.forward(&refs)?;
    let mut s = 0.0;
    for (o, u) in outs.iter().zip(cot) {
        let v = o.to_f64_vec();
        finite(&v)?;
        s += v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(s)
}

fn analytic(op: &OpKind, inputs: &[Tensor], cot: &[Vec<f64>]) -> Result<Vec<Option<Vec<f64>>>> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let outs = op.forward(&refs)?;
    let dtype = inputs[0].dtype();
    let grads: Vec<Tensor> = outs
        .iter()
        .zip(cot)
        .map(|(o, u)| Tensor::from_f64_values(dtype, o.shape().to_vec(), u))
        .collect();
    let grefs: Vec<&Tensor> = grads.iter().collect();
    let orefs: Vec<&Tensor> = outs.iter().collect();
    let res = op.backward(&grefs, &refs, &orefs)?;
    res.into_iter()
        .map(|g| {
            g.map(|t| {
                let v = t.to_f64_vec();
                finite(&v).map(|_| v)
            })
            .transpose()
        })
        .collect()
}

/// Compares `op.backward` against central differences with step `h`.
///
/// Uses the full Jacobian (one-hot cotangents) when every input and the
/// combined outputs have at most [`FULL_JACOBIAN_LIMIT`] elements, and a
/// random-cotangent vector-Jacobian contraction otherwise. Relative error is
/// `|num − ana| / max(1, |ana|)`.
pub fn grad_check(op: &OpKind, inputs: &[Tensor], rng: &mut Rng, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    for t in inputs {
        finite(&t.to_f64_vec())?;
    }
    let x64: Vec<Tensor> = inputs.iter().map(|t| t.cast(DType::F64)).collect();
    let refs: Vec<&Tensor> = x64.iter().collect();
    let out_shapes: Vec<usize> = op.forward(&refs)?.iter().map(|o| o.numel()).collect();
    let diff = op.differentiable_inputs(inputs.len());
    let total_out: usize = out_shapes.iter().sum();
    let full = total_out <= FULL_JACOBIAN_LIMIT && inputs.iter().all(|t| t.numel() <= FULL_JACOBIAN_LIMIT);

    let cotangents: Vec<Vec<Vec<f64>>> = if full {
        (0..total_out)
            .map(|j| {
                let mut offset = 0;
                out_shapes
                    .iter()
                    .map(|&n| {
                        let v = (0..n).map(|i| if offset + i == j { 1.0 } else { 0.0 }).collect();
                        offset += n;
                        v
                    })
                    .collect()
            })
            .collect()
    } else {
        vec![out_shapes.iter().map(|&n| (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).collect()]
    };

    let mut per_input: Vec<Option<f64>> = diff.iter().map(|&d| d.then_some(0.0)).collect();
    for cot in &cotangents {
        let ana = analytic(op, inputs, cot)?;
        for (idx, input) in x64.iter().enumerate() {
            if !diff[idx] {
                continue;
            }
            let g = ana[idx]
                .as_ref()
                .ok_or_else(|| Error::op(op.name(), format!("no gradient for input {idx}")))?;
            let n = input.numel();
            let coords: Vec<usize> = if full || n <= VJP_SAMPLES {
                (0..n).collect()
            } else {
                let mut p = rng.permutation(n);
                p.truncate(VJP_SAMPLES);
                p.sort_unstable();
                p
            };
            let base = input.to_f64_vec();
            let mut worst: f64 = 0.0;
            for i in coords {
                let probe = |delta: f64| -> Result<f64> {
                    let mut v = base.clone();
                    v[i] += delta;
                    let mut xs = x64.clone();
                    xs[idx] = Tensor::from_f64_values(DType::F64, input.shape().to_vec(), &v);
                    contracted(op, &xs, cot)
                };
                let num = (probe(h)? - probe(-h)?) / (2.0 * h);
                worst = worst.max(rel_err(num, g[i]));
            }
            let slot = per_input[idx].as_mut().unwrap();
            *slot = slot.max(worst);
        }
    }
    Ok(GradCheckReport {
        op: op.name().to_string(),
        mode: if full { GradCheckMode::FullJacobian } else { GradCheckMode::VectorJacobian },
        per_input,
    })
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::alloc(&TensorDesc::new(DType::F64, shape.to_vec()).unwrap(), Init::Normal(rng, 0.0, 1.0)).unwrap()
}

/// Values with `|x| ≥ 0.1`, away from the ReLU kink.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.5);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_f64_values(DType::F64, shape.to_vec(), &v)
}

/// Distinct values at least 0.03 apart, so every pooling window has a unique
/// ordering that survives a finite-difference probe.
fn well_separated(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = rng
        .permutation(n)
        .into_iter()
        .map(|p| p as f64 * 0.05 - n as f64 * 0.025 + rng.uniform_range(-0.01, 0.01))
        .collect();
    Tensor::from_f64_values(DType::F64, shape.to_vec(), &v)
}

/// One kink-avoiding f64 input set per reference operator configuration.
pub fn reference_cases(rng: &mut Rng) -> Vec<(String, OpKind, Vec<Tensor>)> {
    let mut cases = Vec::new();
    let mut push = |name: &str, op: OpKind, inputs: Vec<Tensor>| cases.push((name.to_string(), op, inputs));

    push("gemm 3x3 + bias", OpKind::Gemm, vec![randn(rng, &[3, 3]), randn(rng, &[3, 3]), randn(rng, &[3])]);
    push("gemm 5x4x3", OpKind::Gemm, vec![randn(rng, &[5, 4]), randn(rng, &[4, 3])]);
    push(
        "gemm 16x24x12 + bias",
        OpKind::Gemm,
        vec![randn(rng, &[16, 24]), randn(rng, &[24, 12]), randn(rng, &[12])],
    );
    push(
        "conv 1x1x4x4 k2",
        OpKind::Conv(ConvAttrs::new([2, 2])),
        vec![randn(rng, &[1, 1, 4, 4]), randn(rng, &[1, 1, 2, 2])],
    );
    push(
        "conv 2x3x6x5 k3 pad stride bias",
        OpKind::Conv(ConvAttrs::new([3, 3]).with_pads([1, 0, 1, 1]).with_strides([2, 1])),
        vec![randn(rng, &[2, 3, 6, 5]), randn(rng, &[2, 3, 3, 3]), randn(rng, &[2])],
    );
    push(
        "conv 1x2x7x7 k3 dilation 2",
        OpKind::Conv(ConvAttrs::new([3, 3]).with_dilations([2, 2]).with_pads([1, 1, 1, 1])),
        vec![randn(rng, &[1, 2, 7, 7]), randn(rng, &[3, 2, 3, 3]), randn(rng, &[3])],
    );
    push("relu 4x5", OpKind::Relu, vec![away_from_zero(rng, &[4, 5])]);
    push(
        "maxpool 2x2/2",
        OpKind::MaxPool(PoolAttrs::new([2, 2], [2, 2])),
        vec![well_separated(rng, &[1, 2, 4, 4])],
    );
    push(
        "maxpool 3x3/1 pad 1",
        OpKind::MaxPool(PoolAttrs { kernel: [3, 3], strides: [1, 1], pads: [1, 1, 1, 1] }),
        vec![well_separated(rng, &[2, 1, 4, 4])],
    );
    push(
        "medianpool 2x2/1",
        OpKind::MedianPool(PoolAttrs::new([2, 2], [1, 1])),
        vec![well_separated(rng, &[1, 2, 3, 4])],
    );
    push(
        "medianpool 3x3/1 pad 1",
        OpKind::MedianPool(PoolAttrs { kernel: [3, 3], strides: [1, 1], pads: [1, 1, 1, 1] }),
        vec![well_separated(rng, &[1, 1, 5, 5])],
    );
    push("softmax 3x4", OpKind::Softmax, vec![randn(rng, &[3, 4])]);
    let labels: Vec<f64> = (0..4).map(|_| rng.below(3) as f64).collect();
    push(
        "softmax_xent 4x3",
        OpKind::CrossEntropyLoss,
        vec![randn(rng, &[4, 3]), Tensor::from_f64_values(DType::F64, [4], &labels)],
    );
    for (name, op) in [("add", OpKind::Add), ("sub", OpKind::Sub), ("mul", OpKind::Mul)] {
        push(name, op, vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])]);
    }
    push("reshape", OpKind::Reshape(vec![0, -1]), vec![randn(rng, &[2, 3, 2])]);
    push(
        "split [1,2]",
        OpKind::Split { axis: 0, parts: vec![1, 2] },
        vec![randn(rng, &[3, 2, 2])],
    );
    push(
        "concat axis 1",
        OpKind::Concat { axis: 1 },
        vec![randn(rng, &[2, 1, 3]), randn(rng, &[2, 2, 3])],
    );
    cases
}
