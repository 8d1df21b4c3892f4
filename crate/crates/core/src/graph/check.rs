//! End-to-end finite-difference check of graph gradients.

use std::collections::BTreeMap;

use super::{inference, inference_and_backprop, Events, NetworkGraph};
use crate::{DType, Error, Result, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphGradReport {
    /// Max relative error over the probed coordinates of each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub probes: usize,
}

impl GraphGradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }
}

fn loss_value(g: &NetworkGraph, feeds: &BTreeMap<String, Tensor>, loss: &str) -> Result<f64> {
    let out = inference(g, feeds, &[loss], &mut Events::new())?;
    Ok(out.outputs[loss].to_f64_vec().iter().sum())
}

/// Compares backprop gradients of the scalar `loss` against central
/// differences with step `h`, in f64. Each trainable parameter gets up to
/// `samples` coordinates drawn from `rng` (all of them when it is smaller).
/// The relative error of a coordinate is `|num − ana| / max(|ana|, 1)`.
pub fn check_graph_gradients(
    g: &NetworkGraph,
    feeds: &BTreeMap<String, Tensor>,
    loss: &str,
    rng: &mut Rng,
    samples: usize,
    h: f64,
) -> Result<GraphGradReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let mut g = g.cast(DType::F64);
    let feeds: BTreeMap<String, Tensor> = feeds.iter().map(|(k, v)| (k.clone(), v.cast(DType::F64))).collect();
    let ex = inference_and_backprop(&g, &feeds, &[loss], loss, &mut Events::new())?;
    let mut per_param = BTreeMap::new();
    let mut probes = 0;
    let names: Vec<String> = g.gradient_pairs().keys().cloned().collect();
    for name in names {
        let analytic = ex.gradients[&name].to_f64_vec();
        let n = analytic.len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            let mut c = rng.permutation(n);
            c.truncate(samples);
            c
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = g.initializer(&name).expect("trainable parameters have initializers").get_f64(i);
            let mut at = |v: f64| -> Result<f64> {
                g.initializer_mut(&name).unwrap().data_mut::<f64>()?[i] = v;
                loss_value(&g, &feeds, loss)
            };
            let num = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            at(orig)?;
            worst = worst.max((num - analytic[i]).abs() / analytic[i].abs().max(1.0));
            probes += 1;
        }
        per_param.insert(name, worst);
    }
    Ok(GraphGradReport { per_param, probes })
}
