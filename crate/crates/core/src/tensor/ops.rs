use super::{same_dtype, same_shape, Element, Tensor};
use crate::{with_slice, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Checked: a zero divisor is an error rather than an infinity.
    Div,
    Scale(f64),
    Relu,
    Exp,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

/// Elementwise arithmetic without broadcasting.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if op.is_binary() {
        let b = b.ok_or_else(|| Error::InvalidArgument(format!("{op:?} needs two operands")))?;
        same_dtype(a, b)?;
        same_shape(a, b)?;
        match (a.storage(), b.storage()) {
            (super::Storage::F32(x), super::Storage::F32(y)) => binary(op, a.shape(), x, y),
            (super::Storage::F64(x), super::Storage::F64(y)) => binary(op, a.shape(), x, y),
            _ => unreachable!("dtype checked above"),
        }
    } else {
        if b.is_some() {
            return Err(Error::InvalidArgument(format!("{op:?} takes one operand")));
        }
        with_slice!(a, x => unary(op, a.shape(), x))
    }
}

fn binary<T: Element>(op: ElementwiseOp, shape: &[usize], x: &[T], y: &[T]) -> Result<Tensor> {
    let out: Vec<T> = match op {
        ElementwiseOp::Add => x.iter().zip(y).map(|(&a, &b)| a + b).collect(),
        ElementwiseOp::Sub => x.iter().zip(y).map(|(&a, &b)| a - b).collect(),
        ElementwiseOp::Mul => x.iter().zip(y).map(|(&a, &b)| a * b).collect(),
        ElementwiseOp::Div => {
            if let Some(i) = y.iter().position(|v| *v == T::zero()) {
                return Err(Error::DivisionByZero(i));
            }
            x.iter().zip(y).map(|(&a, &b)| a / b).collect()
        }
        _ => unreachable!(),
    };
    Tensor::from_vec(shape.to_vec(), out)
}

fn unary<T: Element>(op: ElementwiseOp, shape: &[usize], x: &[T]) -> Result<Tensor> {
    let out: Vec<T> = match op {
        ElementwiseOp::Scale(s) => {
            let s = T::from_f64(s);
            x.iter().map(|&a| a * s).collect()
        }
        ElementwiseOp::Relu => x.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        ElementwiseOp::Exp => x.iter().map(|&a| a.exp()).collect(),
        _ => unreachable!(),
    };
    Tensor::from_vec(shape.to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

/// Norm of `a - b`, accumulated in f64 over the flattened difference.
pub fn reduce_norm(a: &Tensor, b: &Tensor, kind: NormKind) -> Result<f64> {
    same_shape(a, b)?;
    let diff = a
        .to_f64_vec()
        .into_iter()
        .zip(b.to_f64_vec())
        .map(|(x, y)| (x - y).abs());
    Ok(match kind {
        NormKind::L1 => diff.sum(),
        NormKind::L2 => diff.map(|d| d * d).sum::<f64>().sqrt(),
        NormKind::Linf => diff.fold(0.0, f64::max),
    })
}

/// Per-element unbiased sample variance across runs (Welford, f64 output).
pub fn variance_map(runs: &[Tensor]) -> Result<Tensor> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let first = &runs[0];
    let mut mean = vec![0.0f64; first.numel()];
    let mut m2 = vec![0.0f64; first.numel()];
    for (k, run) in runs.iter().enumerate() {
        same_shape(first, run)?;
        let count = (k + 1) as f64;
        for (i, x) in run.to_f64_vec().into_iter().enumerate() {
            let delta = x - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (x - mean[i]);
        }
    }
    let denom = (runs.len() - 1) as f64;
    let var: Vec<f64> = m2.into_iter().map(|v| v / denom).collect();
    Tensor::from_vec(first.shape().to_vec(), var)
}
