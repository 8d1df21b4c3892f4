use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use bench500::data_io::{parse_shape_list, ShapeConfig};
use bench500::metrics::{open_output, summary_json, test_forward, test_gradient, Summary, DEFAULT_RUNS};
use bench500::operators::reference::{direct_conv, naive_gemm};
use bench500::operators::{ConvGeometry, OpKind};
use bench500::{DType, Rng, Tensor};

use crate::usage;

pub const SUPPORTED_OPS: &[&str] = &["gemm", "conv"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> DType {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct OpbenchArgs {
    /// Operator to benchmark (gemm or conv); rows for other ops are skipped.
    #[arg(long)]
    pub op: Option<String>,
    /// CSV shape list, one `op,params...` row per configuration.
    #[arg(long, value_name = "PATH")]
    pub shapes: Option<PathBuf>,
    /// Timed runs per measurement [default: 30].
    #[arg(long)]
    pub runs: Option<usize>,
    /// Element type of the benchmarked kernels [default: f32].
    #[arg(long, value_enum)]
    pub dtype: Option<Precision>,
    /// Seed for the random operands [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run the finite-difference gradient check [default: true].
    #[arg(long)]
    pub gradient: Option<bool>,
    /// Output file; `.csv` selects CSV, anything else JSON, `-` stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<String>,
}

fn operands(cfg: &ShapeConfig, dtype: DType, rng: &mut Rng) -> anyhow::Result<(OpKind, Vec<Tensor>)> {
    let (op, descs) = cfg.instantiate(dtype)?;
    let inputs = descs
        .iter()
        .map(|d| {
            let v: Vec<f64> = (0..d.numel()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            Tensor::from_f64_values(dtype, d.shape.clone(), &v)
        })
        .collect();
    Ok((op, inputs))
}

/// Independent f64 implementation of the benchmarked operator.
fn reference(op: &OpKind, inputs: &[Tensor]) -> bench500::Result<Vec<Tensor>> {
    let a = inputs[0].to_f64_vec();
    let b = inputs[1].to_f64_vec();
    let (x, w) = (inputs[0].shape(), inputs[1].shape());
    let out = match op {
        OpKind::Conv(attrs) => {
            let (oh, ow) = attrs.output_extent(x[2], x[3])?;
            let g = ConvGeometry { n: x[0], c: x[1], h: x[2], w: x[3], f: w[0], kh: w[2], kw: w[3], oh, ow };
            Tensor::from_vec([x[0], w[0], oh, ow], direct_conv(&a, &b, None, attrs, &g))?
        }
        _ => Tensor::from_vec([x[0], w[1]], naive_gemm(&a, &b, x[0], x[1], w[1]))?,
    };
    Ok(vec![out])
}

struct Row {
    label: String,
    linf: f64,
    l2: f64,
    max_variance: f64,
    grad_error: Option<f64>,
    forward: Summary,
    backward: Option<Summary>,
}

impl Row {
    fn json(&self) -> Value {
        json!({
            "shape": self.label,
            "linf": self.linf,
            "l2": self.l2,
            "max_variance": self.max_variance,
            "grad_max_rel_error": self.grad_error,
            "timing": {
                "forward": summary_json("forward", &self.forward),
                "backward": self.backward.as_ref().map(|s| summary_json("backward", s)),
            },
        })
    }
}

pub fn run(args: OpbenchArgs) -> anyhow::Result<()> {
    let op = args.op.ok_or_else(|| usage(format!("--op is required (supported: {})", SUPPORTED_OPS.join(", "))))?;
    if !SUPPORTED_OPS.contains(&op.as_str()) {
        return Err(usage(format!("unknown op `{op}` (supported: {})", SUPPORTED_OPS.join(", "))));
    }
    let path = args.shapes.ok_or_else(|| usage("--shapes is required"))?;
    let runs = args.runs.unwrap_or(DEFAULT_RUNS);
    if runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let dtype: DType = args.dtype.unwrap_or(Precision::F32).into();
    let seed = args.seed.unwrap_or(0);
    let gradient = args.gradient.unwrap_or(true);
    let out = args.out.unwrap_or_else(|| "-".into());

    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let shapes = parse_shape_list(&text).with_context(|| format!("in {}", path.display()))?;
    let selected: Vec<ShapeConfig> = shapes
        .into_iter()
        .filter(|s| matches!((s, op.as_str()), (ShapeConfig::Gemm { .. }, "gemm") | (ShapeConfig::Conv { .. }, "conv")))
        .collect();

    let mut rows = Vec::with_capacity(selected.len());
    for (i, cfg) in selected.iter().enumerate() {
        let mut rng = Rng::new(seed, i as u64);
        let (kind, inputs) = operands(cfg, dtype, &mut rng)?;
        let fwd = test_forward(&kind, &inputs, |x| reference(&kind, x), runs)
            .with_context(|| format!("forward {}", cfg.label()))?;
        let (grad_error, backward) = if gradient {
            let r = test_gradient(&kind, &inputs, &mut rng, runs).with_context(|| format!("gradient {}", cfg.label()))?;
            (Some(r.check.max_rel_error()), Some(r.timing))
        } else {
            (None, None)
        };
        rows.push(Row {
            label: cfg.label(),
            linf: fwd.max_linf(),
            l2: fwd.norms[0].l2,
            max_variance: fwd.max_variance.iter().copied().fold(0.0, f64::max),
            grad_error,
            forward: fwd.timing,
            backward,
        });
    }

    let mut w = open_output(&out)?;
    if out.ends_with(".csv") {
        writeln!(w, "shape,linf,l2,max_variance,grad_max_rel_error,fwd_median_ms,fwd_ci_low_ms,fwd_ci_high_ms,bwd_median_ms")?;
        for r in &rows {
            let ms = |v: f64| format!("{:.3}", v * 1e3);
            let num = |v: f64| serde_json::to_string(&v).expect("finite numbers serialize");
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                num(r.linf),
                num(r.l2),
                num(r.max_variance),
                r.grad_error.map(num).unwrap_or_default(),
                ms(r.forward.median),
                ms(r.forward.ci_low),
                ms(r.forward.ci_high),
                r.backward.map(|s| ms(s.median)).unwrap_or_default(),
            )?;
        }
    } else {
        let doc = json!({
            "op": op,
            "dtype": dtype,
            "runs": runs,
            "seed": seed,
            "rows": rows.iter().map(Row::json).collect::<Vec<_>>(),
        });
        writeln!(w, "{}", serde_json::to_string_pretty(&doc)?)?;
    }
    w.flush()?;
    Ok(())
}
