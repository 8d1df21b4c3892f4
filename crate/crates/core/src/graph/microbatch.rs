//! Micro-batching of convolutions under a workspace memory cap.
//!
//! A convolution whose workspace exceeds the cap is replaced by
//! `Split → k convolution copies → Concat` along the batch axis. Each image
//! is processed by the same kernel in the same order either way, so outputs
//! are unchanged bit for bit.

use super::{NetworkGraph, Node};
use crate::error::GraphError;
use crate::operators::{ConvAttrs, OpKind};
use crate::{Error, Result};

/// Linear workspace model: `bytes = alpha·microbatch + beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
}

impl CostModel {
    pub fn linear(alpha: f64, beta: f64) -> Self {
        CostModel { alpha, beta }
    }

    /// im2col buffer plus output per image, for one convolution.
    pub fn im2col(c: usize, h: usize, w: usize, f: usize, attrs: &ConvAttrs, elem_bytes: usize) -> Result<Self> {
        let (oh, ow) = attrs.output_extent(h, w)?;
        let per_image = (c * attrs.kernel[0] * attrs.kernel[1] * oh * ow + f * oh * ow) * elem_bytes;
        Ok(CostModel { alpha: per_image as f64, beta: 0.0 })
    }

    pub fn workspace(&self, microbatch: usize) -> u64 {
        (self.alpha * microbatch as f64 + self.beta).ceil().max(0.0) as u64
    }

    /// Largest divisor of `batch` whose workspace fits `cap`.
    pub fn best_microbatch(&self, batch: usize, cap: u64) -> Option<usize> {
        (1..=batch).rev().filter(|d| batch % d == 0).find(|&d| self.workspace(d) <= cap)
    }
}

/// Batch extent seen by each convolution: the micro-batch when its input
/// comes from a batch split, `batch` otherwise.
pub fn conv_batches(g: &NetworkGraph, batch: usize) -> Vec<(String, usize)> {
    g.nodes()
        .iter()
        .filter(|n| matches!(n.op, OpKind::Conv(_)))
        .map(|n| {
            let split = g.nodes().iter().find_map(|p| match &p.op {
                OpKind::Split { axis: 0, parts } => {
                    p.outputs.iter().position(|o| *o == n.inputs[0]).map(|i| parts[i])
                }
                _ => None,
            });
            (n.name.clone(), split.unwrap_or(batch))
        })
        .collect()
}

/// Whether every convolution's workspace fits the cap.
pub fn fits(g: &NetworkGraph, cap: u64, cost: &CostModel, batch: usize) -> bool {
    conv_batches(g, batch).iter().all(|(_, b)| cost.workspace(*b) <= cap)
}

/// Rewrites every convolution over the cap. `batch` is the leading extent of
/// the convolution inputs.
pub fn microbatch_transform(g: &NetworkGraph, cap: u64, cost: &CostModel, batch: usize) -> Result<NetworkGraph> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !g.nodes().iter().any(|n| matches!(n.op, OpKind::Conv(_))) {
        return Err(GraphError::NoConvolution.into());
    }
    let mut out = g.clone();
    let mut rewritten = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let OpKind::Conv(attrs) = &node.op else {
            rewritten.push(node.clone());
            continue;
        };
        if cost.workspace(batch) <= cap {
            rewritten.push(node.clone());
            continue;
        }
        let mb = cost.best_microbatch(batch, cap).ok_or_else(|| GraphError::InfeasibleCap {
            node: node.name.clone(),
            cap,
            needed: cost.workspace(1),
        })?;
        let k = batch / mb;
        let x = &node.inputs[0];
        let y = &node.outputs[0];
        let parts: Vec<String> = (0..k).map(|i| format!("{}/mb{i}.in", node.name)).collect();
        let outs: Vec<String> = (0..k).map(|i| format!("{}/mb{i}.out", node.name)).collect();
        rewritten.push(Node {
            name: format!("{}/split", node.name),
            op: OpKind::Split { axis: 0, parts: vec![mb; k] },
            inputs: vec![x.clone()],
            outputs: parts.clone(),
        });
        for i in 0..k {
            let mut inputs = node.inputs.clone();
            inputs[0] = parts[i].clone();
            rewritten.push(Node {
                name: format!("{}/mb{i}", node.name),
                op: OpKind::Conv(*attrs),
                inputs,
                outputs: vec![outs[i].clone()],
            });
        }
        rewritten.push(Node {
            name: format!("{}/concat", node.name),
            op: OpKind::Concat { axis: 0 },
            inputs: outs,
            outputs: vec![y.clone()],
        });
    }
    *out.nodes_mut() = rewritten;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisor_search() {
        let c = CostModel::linear(100.0, 10.0);
        assert_eq!(c.best_microbatch(4, 1000), Some(4));
        assert_eq!(c.best_microbatch(4, 250), Some(2));
        assert_eq!(c.best_microbatch(6, 350), Some(3));
        assert_eq!(c.best_microbatch(7, 350), Some(1));
        assert_eq!(c.best_microbatch(4, 50), None);
    }

    #[test]
    fn large_batch_exceeds_cap_only_untransformed() {
        // A linear model where 468 images overflow the cap but small
        // micro-batches do not.
        let cost = CostModel::linear(64.0 * 1024.0 * 1024.0, 0.0);
        let cap = 8 * 1024 * 1024 * 1024u64;
        assert!(cost.workspace(468) > cap);
        let mb = cost.best_microbatch(468, cap).unwrap();
        assert!(cost.workspace(mb) <= cap && 468 % mb == 0);
        assert_eq!(mb, 117);
    }
}
