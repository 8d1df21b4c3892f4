use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use bench500::data_io::{load_mnist, mnist_dir, synthetic_dataset, Dataset, Manifest, SyntheticKind};
use bench500::distributed::{run_distributed, DistConfig, Sampling, Scheme, TransportKind};
use bench500::graph::model::load_model_file;
use bench500::graph::{save_model, Events, NetworkGraph};
use bench500::metrics::open_output;
use bench500::models::{builtin, BUILTINS};
use bench500::training::{train, MetricStream, OptimizerKind, TrainingConfig, UpdateRule};
use bench500::training::optim::AcceleGradConfig;

use crate::opbench::Precision;
use crate::usage;

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// `builtin:<name>` or a model file [default: builtin:mlp].
    #[arg(long)]
    pub model: Option<String>,
    /// `mnist`, `mnist:<dir>`, `synthetic:<n>` or a dataset manifest [default: mnist].
    #[arg(long)]
    pub dataset: Option<String>,
    /// sgd, momentum, adagrad, adam, accelegrad, or a JSON object such as
    /// `{"kind":"adam","beta1":0.8}` [default: sgd].
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Base learning rate [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size (per worker for disttrain) [default: 64].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Passes over the training set [default: 1].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization, sampling and simulation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training precision [default: f32 for built-in models, the file's type otherwise].
    #[arg(long, value_enum)]
    pub dtype: Option<Precision>,
    /// Stop after this many steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Record training accuracy every this many steps [default: 50].
    #[arg(long)]
    pub train_accuracy_every: Option<usize>,
    /// Metric stream as JSON lines; `-` is stdout (train default).
    #[arg(long, value_name = "PATH")]
    pub out: Option<String>,
    /// Write the trained model here.
    #[arg(long, value_name = "PATH")]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Dsgd,
    Topk,
    Dpsgd,
    Mavg,
    Pssgd,
    Asgd,
    Ssp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportName {
    Sim,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplingName {
    Shared,
    Sharded,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DistArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    /// Number of workers [default: 2].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Distributed scheme [default: dsgd].
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeName>,
    /// Staleness bound for ssp [default: 3].
    #[arg(long)]
    pub staleness: Option<usize>,
    /// Averaging period for mavg [default: 10].
    #[arg(long)]
    pub every: Option<usize>,
    /// Gradient density for top-k sparsification; turns dsgd into topk.
    #[arg(long)]
    pub density: Option<f64>,
    /// In-process simulated links or loopback TCP [default: sim].
    #[arg(long, value_enum)]
    pub transport: Option<TransportName>,
    /// One shared sample schedule or per-worker shards [default: shared].
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingName>,
    /// Receive timeout in milliseconds [default: 30000].
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Communication and convergence report (JSON); `-` is stdout [default: -].
    #[arg(long, value_name = "PATH")]
    pub report: Option<String>,
}

fn parse_optimizer(spec: &str) -> anyhow::Result<OptimizerKind> {
    let kind = match spec {
        "sgd" => OptimizerKind::Rule(UpdateRule::Sgd),
        "momentum" => OptimizerKind::Rule(UpdateRule::Momentum { mu: 0.9 }),
        "adagrad" => OptimizerKind::Rule(UpdateRule::Adagrad { eps: 1e-8 }),
        "adam" => OptimizerKind::Rule(UpdateRule::adam()),
        "accelegrad" => OptimizerKind::AcceleGrad(AcceleGradConfig::default()),
        s if s.trim_start().starts_with('{') => {
            serde_json::from_str(s).map_err(|e| usage(format!("--optimizer {s}: {e}")))?
        }
        other => {
            return Err(usage(format!(
                "unknown optimizer `{other}` (supported: sgd, momentum, adagrad, adam, accelegrad)"
            )))
        }
    };
    Ok(kind)
}

fn load_graph(spec: &str, dtype: Option<Precision>, seed: u64) -> anyhow::Result<NetworkGraph> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        if !BUILTINS.contains(&name) {
            return Err(usage(format!("unknown built-in model `{name}` (available: {})", BUILTINS.join(", "))));
        }
        return Ok(builtin(name, dtype.unwrap_or(Precision::F32).into(), seed)?);
    }
    let g = load_model_file(Path::new(spec)).with_context(|| format!("loading model {spec}"))?;
    Ok(match dtype {
        Some(d) => g.cast(d.into()),
        None => g,
    })
}

fn load_data(spec: &str, seed: u64) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    if spec == "mnist" {
        let dir = mnist_dir();
        let (tr, te) = load_mnist(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))?;
        return Ok((tr, Some(te)));
    }
    if let Some(dir) = spec.strip_prefix("mnist:") {
        let (tr, te) = load_mnist(Path::new(dir)).with_context(|| format!("loading MNIST from {dir}"))?;
        return Ok((tr, Some(te)));
    }
    if let Some(n) = spec.strip_prefix("synthetic:") {
        let n: usize = n.parse().map_err(|_| usage(format!("`{spec}`: expected synthetic:<count>")))?;
        let blobs = SyntheticKind::GaussianBlobs { sigma: 1.0 };
        let tr = synthetic_dataset(n, &[28, 28], 10, blobs, seed)?;
        let te = synthetic_dataset((n / 5).max(10), &[28, 28], 10, blobs, seed.wrapping_add(1))?;
        return Ok((tr, Some(te)));
    }
    Manifest::open(Path::new(spec)).with_context(|| format!("loading dataset manifest {spec}"))
}

struct Setup {
    graph: NetworkGraph,
    train: Dataset,
    test: Option<Dataset>,
    cfg: TrainingConfig,
}

fn setup(a: &TrainArgs) -> anyhow::Result<Setup> {
    let seed = a.seed.unwrap_or(0);
    let graph = load_graph(a.model.as_deref().unwrap_or("builtin:mlp"), a.dtype, seed)?;
    let (train, test) = load_data(a.dataset.as_deref().unwrap_or("mnist"), seed)?;
    let defaults = TrainingConfig::default();
    let cfg = TrainingConfig {
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed,
        lr: a.lr.unwrap_or(defaults.lr),
        optimizer: a.optimizer.as_deref().map(parse_optimizer).transpose()?.unwrap_or(defaults.optimizer),
        train_accuracy_every: a.train_accuracy_every.unwrap_or(defaults.train_accuracy_every),
        dtype: bench500::training::graph_dtype(&graph),
        max_steps: a.max_steps,
        ..defaults
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Setup { graph, train, test, cfg })
}

fn write_text(path: &str, text: &str) -> anyhow::Result<()> {
    let mut w = open_output(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn save_graph(path: Option<&Path>, g: &NetworkGraph) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, save_model(g)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn summarize(stream: &MetricStream) -> String {
    let fmt = |m: &str| stream.last(m).map_or("-".to_string(), |v| format!("{v:.4}"));
    format!("loss {} test_accuracy {}", fmt("loss"), fmt("test_accuracy"))
}

pub fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let s = setup(&a)?;
    let (g, stream) = train(s.graph, &s.train, s.test.as_ref(), &s.cfg, &mut Events::new())?;
    write_text(a.out.as_deref().unwrap_or("-"), &stream.to_jsonl(true))?;
    save_graph(a.model_out.as_deref(), &g)?;
    eprintln!("trained {} records: {}", stream.records.len(), summarize(&stream));
    Ok(())
}

fn scheme(a: &DistArgs) -> Scheme {
    let name = match (a.scheme.unwrap_or(SchemeName::Dsgd), a.density) {
        (SchemeName::Dsgd, Some(_)) => SchemeName::Topk,
        (s, _) => s,
    };
    match name {
        SchemeName::Dsgd => Scheme::Dsgd,
        SchemeName::Topk => Scheme::Topk { density: a.density.unwrap_or(0.1) },
        SchemeName::Dpsgd => Scheme::Dpsgd,
        SchemeName::Mavg => Scheme::Mavg { every: a.every.unwrap_or(10) },
        SchemeName::Pssgd => Scheme::Pssgd,
        SchemeName::Asgd => Scheme::Asgd,
        SchemeName::Ssp => Scheme::Ssp { staleness: a.staleness.unwrap_or(3) },
    }
}

pub fn run_dist(a: DistArgs) -> anyhow::Result<()> {
    let s = setup(&a.train)?;
    let mut dist = DistConfig::new(a.workers.unwrap_or(2), scheme(&a));
    dist.transport = match a.transport.unwrap_or(TransportName::Sim) {
        TransportName::Sim => TransportKind::Sim,
        TransportName::Tcp => TransportKind::Tcp,
    };
    dist.sampling = match a.sampling.unwrap_or(SamplingName::Shared) {
        SamplingName::Shared => Sampling::Shared,
        SamplingName::Sharded => Sampling::Sharded,
    };
    if let Some(t) = a.timeout_ms {
        dist.timeout_ms = t;
    }
    dist.delays.seed = s.cfg.seed;
    dist.validate(&s.cfg).map_err(|e| usage(e.to_string()))?;

    let run = run_distributed(&s.graph, &s.train, s.test.as_ref(), &s.cfg, &dist)?;
    if let Some(out) = a.train.out.as_deref() {
        write_text(out, &run.stream.to_jsonl(true))?;
    }
    save_graph(a.train.model_out.as_deref(), &run.graph)?;
    let report = json!({
        "scheme": run.scheme,
        "workers": run.workers,
        "transport": dist.transport,
        "sampling": dist.sampling,
        "steps": run.steps,
        "replicas_identical": run.replicas_identical(),
        "convergence": {
            "final_loss": run.stream.last("loss"),
            "final_train_accuracy": run.stream.last("train_accuracy"),
            "final_test_accuracy": run.stream.last("test_accuracy"),
            "loss": run.stream.values("loss"),
            "test_accuracy": run.stream.values("test_accuracy"),
        },
        "comm": run.report(),
    });
    write_text(a.report.as_deref().unwrap_or("-"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    eprintln!("{} with {} workers, {} steps: {}", run.scheme.name(), run.workers, run.steps, summarize(&run.stream));
    Ok(())
}
