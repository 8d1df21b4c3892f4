use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use bench500::graph::microbatch::{conv_batches, fits};
use bench500::graph::model::load_model_file;
use bench500::graph::{microbatch_transform, save_model, CostModel};

use crate::usage;

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TransformArgs {
    /// Model file to transform.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Workspace cap per convolution in bytes.
    #[arg(long)]
    pub memory_cap: Option<u64>,
    /// Workspace bytes per image of the linear cost model.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Constant workspace bytes of the linear cost model [default: 0].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Batch size the convolutions will see.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Where to write the transformed model.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn run(a: TransformArgs) -> anyhow::Result<()> {
    let model = a.model.ok_or_else(|| usage("--model is required"))?;
    let cap = a.memory_cap.ok_or_else(|| usage("--memory-cap is required"))?;
    let alpha = a.alpha.ok_or_else(|| usage("--alpha is required"))?;
    let beta = a.beta.unwrap_or(0.0);
    let batch = a.batch.ok_or_else(|| usage("--batch is required"))?;
    if batch == 0 || !alpha.is_finite() || !beta.is_finite() || alpha < 0.0 {
        return Err(usage("--batch must be positive and --alpha/--beta finite, alpha non-negative"));
    }
    let cost = CostModel::linear(alpha, beta);

    let g = load_model_file(&model).with_context(|| format!("loading model {}", model.display()))?;
    let fitted = fits(&g, cap, &cost, batch);
    let t = microbatch_transform(&g, cap, &cost, batch)?;
    if let Some(out) = a.out.as_deref() {
        write(out, &save_model(&t))?;
    }
    let convs: Vec<_> = conv_batches(&g, batch)
        .into_iter()
        .map(|(name, b)| {
            let micro = if cost.workspace(b) <= cap { b } else { cost.best_microbatch(b, cap).unwrap_or(b) };
            json!({
                "name": name,
                "batch": b,
                "microbatch": micro,
                "parts": b / micro,
                "workspace_before": cost.workspace(b),
                "workspace_after": cost.workspace(micro),
            })
        })
        .collect();
    let summary = json!({
        "memory_cap": cap,
        "batch": batch,
        "changed": !fitted,
        "convolutions": convs,
    });
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
