//! Validation entry points: operator correctness, gradient checks,
//! optimizer divergence and end-to-end training.

use std::time::Instant;

use serde::Serialize;

use super::{run_repeated, MetricRecord, Summary};
use crate::data_io::Dataset;
use crate::graph::{Events, NetworkGraph};
use crate::operators::{grad_check, GradCheckReport, OpKind, Operator};
use crate::tensor::{reduce_norm, variance_map, NormKind};
use crate::training::{MetricStream, Trainer, TrainingConfig};
use crate::{Error, Result, Rng, Tensor};

/// Finite-difference step used by [`test_gradient`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Distance between two tensors in three norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl Norms {
    pub fn between(a: &Tensor, b: &Tensor) -> Result<Norms> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs reference {:?}", a.shape(), b.shape())));
        }
        Ok(Norms {
            l1: reduce_norm(a, b, NormKind::L1)?,
            l2: reduce_norm(a, b, NormKind::L2)?,
            linf: reduce_norm(a, b, NormKind::Linf)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub op: String,
    /// One entry per output.
    pub norms: Vec<Norms>,
    /// Largest elementwise variance of each output across the timed runs.
    pub max_variance: Vec<f64>,
    /// Seconds per forward call.
    pub timing: Summary,
}

impl ForwardReport {
    pub fn max_linf(&self) -> f64 {
        self.norms.iter().map(|n| n.linf).fold(0.0, f64::max)
    }
}

/// Compares `op` against `reference` on `inputs` and times the forward pass
/// over `runs` runs.
pub fn test_forward<R>(op: &OpKind, inputs: &[Tensor], reference: R, runs: usize) -> Result<ForwardReport>
where
    R: FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let expected = reference(inputs)?;
    let mut outputs: Vec<Vec<Tensor>> = Vec::new();
    let timing = run_repeated(op.name(), runs, |run| {
        let out = op.forward(&refs)?;
        if run > 0 && outputs.len() < 8 {
            outputs.push(out);
        }
        Ok(())
    })
    .map_err(|a| a.source)?
    .summary;
    let first = &outputs[0];
    if first.len() != expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs vs {} from the reference",
            first.len(),
            expected.len()
        )));
    }
    let norms = first.iter().zip(&expected).map(|(a, b)| Norms::between(a, b)).collect::<Result<_>>()?;
    let max_variance = (0..first.len())
        .map(|i| {
            if outputs.len() < 2 {
                return Ok(0.0);
            }
            let per_run: Vec<Tensor> = outputs.iter().map(|o| o[i].clone()).collect();
            Ok(variance_map(&per_run)?.to_f64_vec().into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(ForwardReport { op: op.name().to_string(), norms, max_variance, timing })
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub check: GradCheckReport,
    /// Seconds per backward call with a ones cotangent.
    pub timing: Summary,
}

/// Finite-difference gradient check plus backward timing.
pub fn test_gradient(op: &OpKind, inputs: &[Tensor], rng: &mut Rng, runs: usize) -> Result<GradientReport> {
    let check = grad_check(op, inputs, rng, GRAD_CHECK_STEP)?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let outs = op.forward(&refs)?;
    let ones: Vec<Tensor> = outs.iter().map(|o| Tensor::full(o.dtype(), o.shape().to_vec(), 1.0)).collect();
    let grefs: Vec<&Tensor> = ones.iter().collect();
    let orefs: Vec<&Tensor> = outs.iter().collect();
    let timing = run_repeated(op.name(), runs, |_| {
        std::hint::black_box(op.backward(&grefs, &refs, &orefs)?);
        Ok(())
    })
    .map_err(|a| a.source)?
    .summary;
    Ok(GradientReport { check, timing })
}

/// Distance between two parameter trajectories after one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergencePoint {
    pub step: usize,
    pub l2: f64,
    pub linf: f64,
}

/// Per-parameter divergence between two optimizer runs, step by step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DivergenceCurves {
    pub params: Vec<String>,
    /// `curves[i]` belongs to `params[i]`.
    pub curves: Vec<Vec<DivergencePoint>>,
}

impl DivergenceCurves {
    pub fn is_zero(&self) -> bool {
        self.curves.iter().flatten().all(|p| p.l2 == 0.0 && p.linf == 0.0)
    }

    /// ℓ2 distance over all parameters, per step.
    pub fn total_l2(&self) -> Vec<f64> {
        let steps = self.curves.first().map_or(0, Vec::len);
        (0..steps)
            .map(|s| self.curves.iter().map(|c| c[s].l2 * c[s].l2).sum::<f64>().sqrt())
            .collect()
    }

    /// Rows for [`super::write_csv`]: metrics `l2/<param>` and
    /// `linf/<param>`, indexed by step.
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (p, curve) in self.params.iter().zip(&self.curves) {
            for pt in curve {
                for (kind, v) in [("l2", pt.l2), ("linf", pt.linf)] {
                    out.push(MetricRecord {
                        name: format!("{kind}/{p}"),
                        value: v,
                        unit: String::new(),
                        index: pt.step,
                        wall_ns: 0,
                        worker: None,
                    });
                }
            }
        }
        out
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Runs two optimizer configurations side by side from the same initial
/// parameters and batches, recording how far apart the parameters drift.
/// Each side trains `g` cast to its own dtype.
pub fn test_optimizer(
    a: &TrainingConfig,
    b: &TrainingConfig,
    g: &NetworkGraph,
    ds: &Dataset,
    steps: usize,
) -> Result<DivergenceCurves> {
    if a.batch_size != b.batch_size || a.seed != b.seed || a.sampler != b.sampler {
        return Err(Error::InvalidArgument(
            "optimizer comparison needs matching batch size, seed and sampler".into(),
        ));
    }
    let prepare = |cfg: &TrainingConfig| -> Result<Trainer<'_>> {
        let mut cfg = cfg.clone();
        let per_epoch = ds.len() / cfg.batch_size.max(1);
        cfg.epochs = steps.div_ceil(per_epoch.max(1)).max(1);
        cfg.max_steps = Some(steps);
        cfg.instrument = false;
        Trainer::new(g.cast(cfg.dtype), ds, None, cfg)
    };
    let mut ta = prepare(a)?;
    let mut tb = prepare(b)?;
    let params: Vec<String> = g.gradient_pairs().keys().cloned().collect();
    let mut curves = vec![Vec::with_capacity(steps); params.len()];
    let mut ev = Events::new();
    for step in 0..steps {
        ta.step(&mut ev)?;
        tb.step(&mut ev)?;
        for (p, curve) in params.iter().zip(curves.iter_mut()) {
            let (x, y) = (ta.graph().initializer(p).unwrap(), tb.graph().initializer(p).unwrap());
            curve.push(DivergencePoint {
                step,
                l2: reduce_norm(x, y, NormKind::L2)?,
                linf: reduce_norm(x, y, NormKind::Linf)?,
            });
        }
    }
    Ok(DivergenceCurves { params, curves })
}

/// A way to train a graph: sequentially or with a distributed scheme.
pub trait TrainingScheme {
    fn name(&self) -> String;
    fn train(
        &self,
        g: NetworkGraph,
        train: &Dataset,
        test: Option<&Dataset>,
        cfg: &TrainingConfig,
    ) -> Result<(NetworkGraph, MetricStream)>;
}

/// Single-worker minibatch SGD.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl TrainingScheme for Sequential {
    fn name(&self) -> String {
        "sequential".into()
    }

    fn train(
        &self,
        g: NetworkGraph,
        train: &Dataset,
        test: Option<&Dataset>,
        cfg: &TrainingConfig,
    ) -> Result<(NetworkGraph, MetricStream)> {
        crate::training::train(g, train, test, cfg, &mut Events::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub scheme: String,
    pub outcome: Outcome,
    pub graph: Option<NetworkGraph>,
    pub stream: MetricStream,
    pub final_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Trains with `scheme` and summarizes convergence. Divergence is reported
/// as an outcome; other failures are errors.
pub fn test_training<S: TrainingScheme + ?Sized>(
    scheme: &S,
    g: NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainingConfig,
) -> Result<TrainingReport> {
    let t0 = Instant::now();
    let res = scheme.train(g, train, test, cfg);
    let seconds = t0.elapsed().as_secs_f64();
    match res {
        Ok((g, stream)) => Ok(TrainingReport {
            scheme: scheme.name(),
            outcome: Outcome::Completed,
            final_loss: stream.last("loss"),
            final_test_accuracy: stream.last("test_accuracy"),
            graph: Some(g),
            stream,
            seconds,
        }),
        Err(Error::Diverged { step, loss }) => Ok(TrainingReport {
            scheme: scheme.name(),
            outcome: Outcome::Diverged { step, loss },
            graph: None,
            stream: MetricStream::default(),
            final_loss: Some(loss),
            final_test_accuracy: None,
            seconds,
        }),
        Err(e) => Err(e),
    }
}

/// Step times of an instrumented and an uninstrumented run of the same
/// configuration, measured with their steps interleaved.
#[derive(Debug, Clone)]
pub struct InstrumentationOverhead {
    pub instrumented: Summary,
    pub plain: Summary,
    /// `instrumented.median / plain.median − 1`.
    pub overhead: f64,
    pub identical_parameters: bool,
}

pub fn instrumentation_overhead(
    g: &NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainingConfig,
    steps: usize,
) -> Result<InstrumentationOverhead> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let mut on = cfg.clone();
    on.instrument = true;
    on.max_steps = Some(steps);
    let mut off = on.clone();
    off.instrument = false;
    let mut ti = Trainer::new(g.clone(), train, test, on)?;
    let mut tp = Trainer::new(g.clone(), train, test, off)?;
    let mut ev = Events::new();
    let (mut si, mut sp) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for k in 0..steps {
        if ti.finished() {
            break;
        }
        // Alternate which run goes first so cache effects even out.
        let order: [bool; 2] = if k % 2 == 0 { [true, false] } else { [false, true] };
        for instrumented in order {
            let t0 = Instant::now();
            if instrumented {
                ti.step(&mut ev)?;
                si.push(t0.elapsed().as_secs_f64());
            } else {
                tp.step(&mut ev)?;
                sp.push(t0.elapsed().as_secs_f64());
            }
        }
    }
    let instrumented = Summary::of(&si)?;
    let plain = Summary::of(&sp)?;
    let identical_parameters = ti.graph().initializers() == tp.graph().initializers();
    Ok(InstrumentationOverhead {
        overhead: instrumented.median / plain.median - 1.0,
        instrumented,
        plain,
        identical_parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::reference::naive_gemm;
    use crate::tensor::{Init, TensorDesc};
    use crate::DType;

    #[test]
    fn op_against_itself_is_exact() {
        let mut rng = Rng::new(1, 0);
        let a = Tensor::alloc(&TensorDesc::new(DType::F64, [4, 5]).unwrap(), Init::Uniform(&mut rng, -1.0, 1.0)).unwrap();
        let b = Tensor::alloc(&TensorDesc::new(DType::F64, [5, 3]).unwrap(), Init::Uniform(&mut rng, -1.0, 1.0)).unwrap();
        let op = OpKind::Gemm;
        let rep = test_forward(&op, &[a, b], |x| op.forward(&[&x[0], &x[1]]), 5).unwrap();
        assert_eq!(rep.norms[0], Norms { l1: 0.0, l2: 0.0, linf: 0.0 });
        assert_eq!(rep.max_variance, vec![0.0]);
        assert_eq!(rep.timing.n, 5);
    }

    #[test]
    fn gemm_matches_naive_reference() {
        let mut rng = Rng::new(2, 0);
        let a = Tensor::alloc(&TensorDesc::new(DType::F32, [6, 7]).unwrap(), Init::Uniform(&mut rng, -1.0, 1.0)).unwrap();
        let b = Tensor::alloc(&TensorDesc::new(DType::F32, [7, 2]).unwrap(), Init::Uniform(&mut rng, -1.0, 1.0)).unwrap();
        let rep = test_forward(
            &OpKind::Gemm,
            &[a, b],
            |x| {
                let c = naive_gemm(&x[0].to_f64_vec(), &x[1].to_f64_vec(), 6, 7, 2);
                Ok(vec![Tensor::from_vec([6, 2], c)?])
            },
            3,
        )
        .unwrap();
        assert!(rep.max_linf() < 1e-5);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
