//! Data-parallel training over a pluggable transport.
//!
//! Synchronous schemes (`dsgd`, `topk`, `dpsgd`, `mavg`, `pssgd`) run one
//! thread per worker, each owning a graph replica and talking to its peers
//! only through frames. The asynchronous parameter-server schemes (`asgd`,
//! `ssp`) run in a single-threaded discrete-event simulation so that
//! arrival order is a seeded function of the configuration.

pub mod comm;
pub mod des;
pub mod transport;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use comm::{merge_sparse, ring_order_average, topk_split, Comm, CommStats, Volume};
pub use des::{max_step_spread, LogEvent, LogKind};
pub use transport::{sim_world, tcp_world, SimTransport, TcpTransport, Transport};
pub use wire::{Frame, MsgType, SparsePayload, HEADER_LEN};

use crate::data_io::Dataset;
use crate::error::CommError;
use crate::graph::{Events, NetworkGraph};
use crate::metrics::TrainingScheme;
use crate::training::{MetricStream, OptimizerKind, Sampler, SamplerChoice, ThreeStepOptimizer, Trainer, TrainingConfig};
use crate::{Error, Result, Rng, Tensor};

fn default_every() -> usize {
    10
}

fn default_staleness() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scheme {
    /// Allreduce-averaged gradients, identical local updates.
    Dsgd,
    /// Like `dsgd` with top-k sparsified gradients and local residuals.
    Topk { density: f64 },
    /// Local update, then average parameters with both ring neighbours.
    Dpsgd,
    /// Local updates; parameters allreduce-averaged every `every` steps.
    Mavg {
        #[serde(default = "default_every")]
        every: usize,
    },
    /// Parameter server on rank 0 with a barrier per step.
    Pssgd,
    /// Parameter server applying each gradient as it arrives.
    Asgd,
    /// Parameter server whose workers may run at most `staleness` updates
    /// ahead of the global model.
    Ssp {
        #[serde(default = "default_staleness")]
        staleness: usize,
    },
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::Dsgd => "dsgd".into(),
            Scheme::Topk { density } => format!("topk(d={density})"),
            Scheme::Dpsgd => "dpsgd".into(),
            Scheme::Mavg { every } => format!("mavg(k={every})"),
            Scheme::Pssgd => "pssgd".into(),
            Scheme::Asgd => "asgd".into(),
            Scheme::Ssp { staleness } => format!("ssp(s={staleness})"),
        }
    }

    pub fn is_centralized(&self) -> bool {
        matches!(self, Scheme::Pssgd | Scheme::Asgd | Scheme::Ssp { .. })
    }

    fn is_simulated(&self) -> bool {
        matches!(self, Scheme::Asgd | Scheme::Ssp { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Sim,
    Tcp,
}

/// Where worker batches come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// One global schedule of `workers × batch_size` samples per step; each
    /// worker takes its slice.
    #[default]
    Shared,
    /// Each worker samples its own shard from [`partition_dataset`].
    Sharded,
}

/// Timing of the event simulation behind `asgd` and `ssp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub seed: u64,
    /// Per-step compute time, uniform in `[lo, hi]` nanoseconds.
    pub compute_ns: [u64; 2],
    /// One-way latency of a message between distinct ranks.
    pub latency_ns: u64,
    /// Serve workers strictly in rank order, one gradient at a time.
    pub round_robin: bool,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel { seed: 0, compute_ns: [1_000_000, 3_000_000], latency_ns: 100_000, round_robin: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistConfig {
    pub workers: usize,
    pub scheme: Scheme,
    pub transport: TransportKind,
    pub sampling: Sampling,
    pub timeout_ms: u64,
    pub delays: DelayModel,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            workers: 1,
            scheme: Scheme::Dsgd,
            transport: TransportKind::Sim,
            sampling: Sampling::Shared,
            timeout_ms: 30_000,
            delays: DelayModel::default(),
        }
    }
}

impl DistConfig {
    pub fn new(workers: usize, scheme: Scheme) -> Self {
        DistConfig { workers, scheme, ..Default::default() }
    }

    pub fn validate(&self, cfg: &TrainingConfig) -> Result<()> {
        let world = |m: String| -> Result<()> { Err(CommError::World(m).into()) };
        if self.workers == 0 {
            return world("at least one worker is needed".into());
        }
        match self.scheme {
            Scheme::Topk { density } if !(density > 0.0 && density <= 1.0) => {
                return Err(Error::InvalidArgument(format!("density {density} outside (0, 1]")));
            }
            Scheme::Topk { .. } if !self.workers.is_power_of_two() => {
                return world(format!("sparse allreduce needs a power-of-two world, got {}", self.workers));
            }
            Scheme::Mavg { every: 0 } => return Err(Error::InvalidArgument("averaging period must be positive".into())),
            _ => {}
        }
        if self.scheme.is_centralized() && !matches!(cfg.optimizer, OptimizerKind::Rule(_)) {
            return Err(Error::InvalidArgument(format!(
                "{} needs an update-rule optimizer on the server",
                self.scheme.name()
            )));
        }
        if self.scheme.is_simulated() && self.transport != TransportKind::Sim {
            return Err(Error::InvalidArgument(format!("{} runs on the simulator only", self.scheme.name())));
        }
        if self.delays.compute_ns[0] > self.delays.compute_ns[1] {
            return Err(Error::InvalidArgument("compute time range is reversed".into()));
        }
        Ok(())
    }
}

/// Splits `ds` into `p` disjoint shards of a seeded permutation; sizes
/// differ by at most one, larger shards first.
pub fn partition_dataset(ds: &Dataset, p: usize, seed: u64) -> Result<Vec<Dataset>> {
    let n = ds.len();
    if p == 0 || p > n {
        return Err(CommError::World(format!("cannot split {n} samples over {p} workers")).into());
    }
    let perm = Rng::new(seed, 0).permutation(n);
    let mut start = 0;
    (0..p)
        .map(|r| {
            let len = n / p + usize::from(r < n % p);
            let rows = &perm[start..start + len];
            start += len;
            Ok(Dataset {
                name: format!("{}[{r}/{p}]", ds.name),
                features: ds.features.gather_rows(rows)?,
                labels: ds.labels.gather_rows(rows)?,
                classes: ds.classes,
            })
        })
        .collect()
}

/// Result of a distributed run.
#[derive(Debug, Clone)]
pub struct DistRun {
    pub scheme: Scheme,
    pub workers: usize,
    pub steps: usize,
    /// Rank 0's replica (the server model for centralized schemes).
    pub graph: NetworkGraph,
    /// Metrics recorded by rank 0.
    pub stream: MetricStream,
    /// Final trainable parameters of every worker replica.
    pub replicas: Vec<BTreeMap<String, Tensor>>,
    pub stats: Vec<CommStats>,
    /// Event log of simulated schemes; empty otherwise.
    pub log: Vec<LogEvent>,
}

/// Communication summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub scheme: String,
    pub workers: usize,
    pub steps: usize,
    pub aggregate: Volume,
    /// Mean over workers of logical bytes per step.
    pub logical_per_step: f64,
    /// Mean over workers of payload bytes sent per step.
    pub sent_per_step: f64,
    pub per_worker: Vec<CommStats>,
}

impl DistRun {
    /// True when every replica holds the same bits.
    pub fn replicas_identical(&self) -> bool {
        self.replicas.windows(2).all(|w| w[0] == w[1])
    }

    pub fn report(&self) -> CommReport {
        let p = self.stats.len().max(1) as f64;
        CommReport {
            scheme: self.scheme.name(),
            workers: self.workers,
            steps: self.steps,
            aggregate: self.stats.iter().fold(Volume::default(), |a, s| a.plus(&s.total())),
            logical_per_step: self.stats.iter().map(CommStats::logical_per_step).sum::<f64>() / p,
            sent_per_step: self.stats.iter().map(CommStats::sent_per_step).sum::<f64>() / p,
            per_worker: self.stats.clone(),
        }
    }
}

fn trainable(g: &NetworkGraph) -> Vec<String> {
    g.gradient_pairs().keys().cloned().collect()
}

fn params_of(g: &NetworkGraph, names: &[String]) -> BTreeMap<String, Tensor> {
    names.iter().filter_map(|n| g.initializer(n).map(|t| (n.clone(), t.clone()))).collect()
}

/// Per-worker data: the dataset it samples from and its sampler. Also
/// returns the local training config (steps capped for uneven shards).
pub(crate) struct Layout {
    pub shards: Option<Vec<Dataset>>,
    pub cfg: TrainingConfig,
}

impl Layout {
    pub fn new(train: &Dataset, cfg: &TrainingConfig, dist: &DistConfig) -> Result<Layout> {
        let mut cfg = cfg.clone();
        let p = dist.workers;
        let shards = match dist.sampling {
            Sampling::Shared => None,
            Sampling::Sharded => {
                let shards = partition_dataset(train, p, cfg.seed)?;
                let fewest = shards.iter().map(Dataset::len).min().unwrap_or(0);
                if cfg.batch_size > fewest {
                    return Err(Error::InvalidArgument(format!(
                        "batch size {} exceeds the smallest shard ({fewest} samples)",
                        cfg.batch_size
                    )));
                }
                let steps = fewest / cfg.batch_size * cfg.epochs;
                cfg.max_steps = Some(cfg.max_steps.map_or(steps, |m| m.min(steps)));
                Some(shards)
            }
        };
        Ok(Layout { shards, cfg })
    }

    pub fn data<'a>(&'a self, train: &'a Dataset, rank: usize) -> &'a Dataset {
        self.shards.as_ref().map_or(train, |s| &s[rank])
    }

    pub fn sampler(&self, rank: usize, p: usize) -> Result<Sampler> {
        let b = self.cfg.batch_size;
        match (&self.shards, self.cfg.sampler) {
            (Some(_), _) => self.cfg.sampler(),
            (None, SamplerChoice::Sequential) => Sampler::sequential(b * p)?.sliced(rank, p),
            (None, SamplerChoice::Shuffle) => Sampler::shuffle(self.cfg.seed, b * p)?.sliced(rank, p),
        }
    }

    /// Steps every worker runs.
    pub fn total_steps(&self, train: &Dataset, p: usize) -> Result<usize> {
        let per_epoch = self.sampler(0, p)?.steps_per_epoch(Some(self.data(train, 0)))?;
        let mut total = per_epoch * self.cfg.epochs;
        if let Some(m) = self.cfg.max_steps {
            total = total.min(m);
        }
        Ok(total)
    }
}

/// Wraps a local optimizer with the communication of one synchronous scheme.
struct DistOptimizer<'c> {
    base: Box<dyn ThreeStepOptimizer + 'c>,
    comm: Arc<Mutex<Comm>>,
    scheme: Scheme,
    ids: BTreeMap<String, u32>,
    step: Option<u64>,
    residuals: BTreeMap<String, Tensor>,
}

impl ThreeStepOptimizer for DistOptimizer<'_> {
    fn name(&self) -> String {
        format!("{}+{}", self.scheme.name(), self.base.name())
    }

    fn set_lr(&mut self, lr: f64) {
        self.base.set_lr(lr);
    }

    fn new_input(&mut self) -> Result<()> {
        let next = match self.step {
            Some(s) => {
                self.comm.lock().unwrap().close_interval();
                s + 1
            }
            None => 0,
        };
        self.step = Some(next);
        self.base.new_input()
    }

    fn prepare_param(&mut self, name: &str, param: &Tensor) -> Result<Option<Tensor>> {
        self.base.prepare_param(name, param)
    }

    fn update_rule(&mut self, name: &str, grad: &Tensor, old_param: &Tensor) -> Result<Tensor> {
        let step = self.step.ok_or_else(|| Error::InvalidArgument("update before new_input".into()))?;
        let tid = *self
            .ids
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("`{name}` is not a trainable parameter")))?;
        let mut comm = self.comm.lock().unwrap();
        match self.scheme {
            Scheme::Dsgd => {
                let g = comm.allreduce_average(grad, step, tid)?;
                self.base.update_rule(name, &g, old_param)
            }
            Scheme::Topk { density } => {
                let res = self
                    .residuals
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(grad.dtype(), grad.shape().to_vec()));
                let g = comm.topk_sparse_allreduce(grad, res, density, step, tid)?;
                self.base.update_rule(name, &g, old_param)
            }
            Scheme::Dpsgd => {
                let local = self.base.update_rule(name, grad, old_param)?;
                comm.neighbor_average(&local, step, tid)
            }
            Scheme::Mavg { every } => {
                let local = self.base.update_rule(name, grad, old_param)?;
                if (step + 1) % every as u64 == 0 {
                    comm.allreduce_average(&local, step, tid)
                } else {
                    Ok(local)
                }
            }
            Scheme::Pssgd => {
                let base = &mut self.base;
                comm.server_round(0, grad, step, tid, |avg| base.update_rule(name, avg, old_param))
            }
            Scheme::Asgd | Scheme::Ssp { .. } => unreachable!("simulated schemes do not run on threads"),
        }
    }
}

struct WorkerOut {
    graph: NetworkGraph,
    stream: MetricStream,
    stats: CommStats,
}

#[allow(clippy::too_many_arguments)]
fn worker(
    rank: usize,
    transport: Box<dyn Transport>,
    g: &NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    layout: &Layout,
    dist: &DistConfig,
    params: &[String],
) -> Result<WorkerOut> {
    let p = dist.workers;
    let comm = Arc::new(Mutex::new(Comm::new(transport, Duration::from_millis(dist.timeout_ms))));
    let mut graph = g.clone();
    {
        let mut c = comm.lock().unwrap();
        for (tid, name) in params.iter().enumerate() {
            let cur = graph.initializer(name).expect("trainable parameters have initializers");
            let synced = c.broadcast(0, cur, 0, tid as u32)?;
            *graph.initializer_mut(name).unwrap() = synced;
        }
        c.close_interval();
    }
    let mut cfg = layout.cfg.clone();
    cfg.instrument &= rank == 0;
    let base = cfg.optimizer.build(cfg.lr, cfg.checked)?;
    let opt = DistOptimizer {
        base,
        comm: Arc::clone(&comm),
        scheme: dist.scheme,
        ids: params.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect(),
        step: None,
        residuals: BTreeMap::new(),
    };
    let sampler = layout.sampler(rank, p)?;
    let test = if rank == 0 { test } else { None };
    let mut trainer = Trainer::with_optimizer(graph, layout.data(train, rank), test, cfg, sampler, Box::new(opt))?;
    let mut events = Events::new();
    while !trainer.finished() {
        trainer.step(&mut events)?;
    }
    let steps = trainer.steps_done() as u64;
    let (graph, stream) = trainer.into_parts();
    let mut c = comm.lock().unwrap();
    if steps > 0 {
        c.close_interval();
    }
    c.barrier(steps)?;
    Ok(WorkerOut { graph, stream, stats: c.stats().clone() })
}

/// The error that caused a failed run: a worker's own failure rather than
/// the disconnects and timeouts it triggered in its peers.
fn root_cause(errors: Vec<Error>) -> Error {
    let secondary = |e: &Error| matches!(e, Error::Comm(CommError::Disconnected(_) | CommError::Timeout { .. }));
    let pos = errors.iter().position(|e| !secondary(e)).unwrap_or(0);
    errors.into_iter().nth(pos).expect("at least one error")
}

/// Trains `g` with `dist.workers` workers. `cfg.batch_size` is the
/// per-worker batch.
pub fn run_distributed(
    g: &NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainingConfig,
    dist: &DistConfig,
) -> Result<DistRun> {
    cfg.validate()?;
    dist.validate(cfg)?;
    let p = dist.workers;
    let params = trainable(g);
    let layout = Layout::new(train, cfg, dist)?;
    let steps = if cfg.epochs == 0 || cfg.max_steps == Some(0) { 0 } else { layout.total_steps(train, p)? };
    if steps == 0 {
        return Ok(DistRun {
            scheme: dist.scheme,
            workers: p,
            steps: 0,
            graph: g.clone(),
            stream: MetricStream::default(),
            replicas: vec![params_of(g, &params); p],
            stats: (0..p).map(CommStats::new).collect(),
            log: Vec::new(),
        });
    }
    if dist.scheme.is_simulated() {
        return des::run_simulated(g, train, test, &layout, dist, &params, steps);
    }
    let transports: Vec<Box<dyn Transport>> = match dist.transport {
        TransportKind::Sim => sim_world(p, None).into_iter().map(|t| Box::new(t) as Box<dyn Transport>).collect(),
        TransportKind::Tcp => tcp_world(p, Duration::from_millis(dist.timeout_ms))?
            .into_iter()
            .map(|t| Box::new(t) as Box<dyn Transport>)
            .collect(),
    };
    let results: Vec<Result<WorkerOut>> = thread::scope(|s| {
        let handles: Vec<_> = transports
            .into_iter()
            .enumerate()
            .map(|(rank, t)| {
                let (layout, params) = (&layout, &params);
                s.spawn(move || worker(rank, t, g, train, test, layout, dist, params))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut outs = Vec::with_capacity(p);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(o) => outs.push(o),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(root_cause(errors));
    }
    let replicas = outs.iter().map(|o| params_of(&o.graph, &params)).collect();
    let stats = outs.iter().map(|o| o.stats.clone()).collect();
    let first = outs.swap_remove(0);
    Ok(DistRun {
        scheme: dist.scheme,
        workers: p,
        steps,
        graph: first.graph,
        stream: first.stream,
        replicas,
        stats,
        log: Vec::new(),
    })
}

/// A distributed configuration usable wherever a [`TrainingScheme`] is.
#[derive(Debug, Clone)]
pub struct Distributed(pub DistConfig);

impl TrainingScheme for Distributed {
    fn name(&self) -> String {
        format!("{}/p={}", self.0.scheme.name(), self.0.workers)
    }

    fn train(
        &self,
        g: NetworkGraph,
        train: &Dataset,
        test: Option<&Dataset>,
        cfg: &TrainingConfig,
    ) -> Result<(NetworkGraph, MetricStream)> {
        let run = run_distributed(&g, train, test, cfg, &self.0)?;
        Ok((run.graph, run.stream))
    }
}
