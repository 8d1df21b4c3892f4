//! Minibatch SGD training loop, samplers, optimizers and training metrics.

pub mod accelegrad;
pub mod optim;
pub mod sampler;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::graph::{inference, inference_and_backprop, Control, EventKind, Events, NetworkGraph, Snapshot};
use crate::metrics::{run_repeated, Repeated};
use crate::operators::OpKind;
use crate::{par, DType, Error, Result, Tensor};

pub use accelegrad::AcceleGrad;
pub use optim::{
    apply_update_rule, AcceleGradConfig, OptimizerKind, OptimizerState, ThreeStepOptimizer, UpdateRule,
    UpdateRuleOptimizer,
};
pub use sampler::{Sampler, SamplerKind, SyntheticFill, SyntheticLabels, SyntheticSource};

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply by `factor` every `every` epochs.
    StepDecay { factor: f64, every: usize },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::StepDecay { factor, every } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

/// How minibatches are drawn from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerChoice {
    Sequential,
    #[default]
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub sampler: SamplerChoice,
    /// Training accuracy is recorded every this many steps.
    pub train_accuracy_every: usize,
    pub dtype: DType,
    /// Reject non-finite gradients in the update rules.
    pub checked: bool,
    /// Record the metric stream. Parameters do not depend on this flag.
    pub instrument: bool,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Apply update rules directly instead of through the three-step
    /// protocol. Only valid for update-rule optimizers.
    pub direct_update: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            epochs: 1,
            seed: 0,
            lr: 0.01,
            schedule: Schedule::Constant,
            optimizer: OptimizerKind::Rule(UpdateRule::Sgd),
            sampler: SamplerChoice::Shuffle,
            train_accuracy_every: 50,
            dtype: DType::F32,
            checked: false,
            instrument: true,
            max_steps: None,
            direct_update: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.train_accuracy_every == 0 {
            return Err(Error::InvalidArgument("train_accuracy_every must be positive".into()));
        }
        if let Schedule::StepDecay { factor, every } = self.schedule {
            if !(factor > 0.0) || every == 0 {
                return Err(Error::InvalidArgument(format!("bad step decay {factor} every {every}")));
            }
        }
        if self.direct_update && !matches!(self.optimizer, OptimizerKind::Rule(_)) {
            return Err(Error::InvalidArgument("direct updates need an update-rule optimizer".into()));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<Sampler> {
        match self.sampler {
            SamplerChoice::Sequential => Sampler::sequential(self.batch_size),
            SamplerChoice::Shuffle => Sampler::shuffle(self.seed, self.batch_size),
        }
    }
}

/// One entry of a training metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub step: usize,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricStream {
    pub records: Vec<StreamRecord>,
}

impl MetricStream {
    pub fn push(&mut self, step: usize, epoch: usize, metric: &str, value: f64, wall_ns: u64) {
        self.records.push(StreamRecord { step, epoch, metric: metric.to_string(), value, wall_ns });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// One JSON object per line. Without `wall`, the clock field is zeroed
    /// so that streams of identical runs compare equal byte for byte.
    pub fn to_jsonl(&self, wall: bool) -> String {
        let mut out = String::new();
        for r in &self.records {
            let rec = StreamRecord { wall_ns: if wall { r.wall_ns } else { 0 }, ..r.clone() };
            out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Edges a training loop needs to know about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphRoles {
    pub data: String,
    pub labels: Option<String>,
    /// Per-class scores whose row argmax is the prediction.
    pub scores: Option<String>,
    pub loss: String,
}

impl GraphRoles {
    /// With a cross-entropy node: its inputs are the scores and labels and
    /// its first output is the loss. Otherwise the loss is the output named
    /// `loss` (or the first output) and there are no labels.
    pub fn detect(g: &NetworkGraph) -> Result<Self> {
        let ce = g.nodes().iter().find(|n| matches!(n.op, OpKind::CrossEntropyLoss));
        let (labels, scores, loss) = match ce {
            Some(n) => (Some(n.inputs[1].clone()), Some(n.inputs[0].clone()), n.outputs[0].clone()),
            None => {
                let loss = g
                    .outputs()
                    .iter()
                    .find(|o| *o == "loss")
                    .or_else(|| g.outputs().first())
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument("graph declares no outputs".into()))?;
                (None, None, loss)
            }
        };
        let data = g
            .inputs()
            .iter()
            .find(|i| Some(*i) != labels.as_ref())
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("graph has no data input".into()))?;
        Ok(GraphRoles { data, labels, scores, loss })
    }
}

/// Element type of the graph's parameters, f32 if it has none.
pub fn graph_dtype(g: &NetworkGraph) -> DType {
    g.initializers().values().next().map(Tensor::dtype).unwrap_or(DType::F32)
}

/// Row argmax of a `[rows, classes]` score matrix; ties go to the lowest
/// class index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let [rows, classes] = scores.shape() else {
        return Err(Error::ShapeMismatch(format!("scores must be 2-D, got {:?}", scores.shape())));
    };
    let v = scores.to_f64_vec();
    Ok((0..*rows)
        .map(|r| {
            let row = &v[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (c, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn count_correct(scores: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(argmax_rows(scores)?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

enum Updater<'d> {
    ThreeStep(Box<dyn ThreeStepOptimizer + 'd>),
    Direct(UpdateRuleOptimizer),
}

/// A training run, advanced one step at a time.
pub struct Trainer<'d> {
    graph: NetworkGraph,
    cfg: TrainingConfig,
    roles: GraphRoles,
    params: Vec<String>,
    updater: Updater<'d>,
    sampler: Sampler,
    train: &'d Dataset,
    test: Option<&'d Dataset>,
    steps_per_epoch: usize,
    total_steps: usize,
    step: usize,
    stream: MetricStream,
    origin: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(graph: NetworkGraph, train: &'d Dataset, test: Option<&'d Dataset>, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let sampler = cfg.sampler()?;
        Trainer::with_sampler(graph, train, test, cfg, sampler)
    }

    /// Like [`Trainer::new`] with an explicit sampler.
    pub fn with_sampler(
        graph: NetworkGraph,
        train: &'d Dataset,
        test: Option<&'d Dataset>,
        cfg: TrainingConfig,
        sampler: Sampler,
    ) -> Result<Self> {
        let updater = match (cfg.direct_update, cfg.optimizer) {
            (true, OptimizerKind::Rule(r)) => Updater::Direct(UpdateRuleOptimizer::new(r, cfg.lr)?.checked(cfg.checked)),
            _ => Updater::ThreeStep(cfg.optimizer.build(cfg.lr, cfg.checked)?),
        };
        Trainer::assemble(graph, train, test, cfg, sampler, updater)
    }

    /// Like [`Trainer::with_sampler`] with a caller-supplied optimizer;
    /// `cfg.optimizer` and `cfg.direct_update` are ignored.
    pub fn with_optimizer(
        graph: NetworkGraph,
        train: &'d Dataset,
        test: Option<&'d Dataset>,
        cfg: TrainingConfig,
        sampler: Sampler,
        optimizer: Box<dyn ThreeStepOptimizer + 'd>,
    ) -> Result<Self> {
        Trainer::assemble(graph, train, test, cfg, sampler, Updater::ThreeStep(optimizer))
    }

    fn assemble(
        graph: NetworkGraph,
        train: &'d Dataset,
        test: Option<&'d Dataset>,
        cfg: TrainingConfig,
        sampler: Sampler,
        updater: Updater<'d>,
    ) -> Result<Self> {
        cfg.validate()?;
        if sampler.local_batch_size() != cfg.batch_size {
            return Err(Error::InvalidArgument("sampler and config disagree on the batch size".into()));
        }
        let roles = GraphRoles::detect(&graph)?;
        let params: Vec<String> = graph.gradient_pairs().keys().cloned().collect();
        if let Some(p) = params.iter().find(|p| graph.initializer(p).is_none()) {
            return Err(Error::InvalidArgument(format!("gradient pair for unknown parameter `{p}`")));
        }
        let steps_per_epoch = sampler.steps_per_epoch(Some(train))?;
        let mut total_steps = steps_per_epoch * cfg.epochs;
        if let Some(m) = cfg.max_steps {
            total_steps = total_steps.min(m);
        }
        Ok(Trainer {
            graph,
            cfg,
            roles,
            params,
            updater,
            sampler,
            train,
            test,
            steps_per_epoch,
            total_steps,
            step: 0,
            stream: MetricStream::default(),
            origin: Instant::now(),
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn roles(&self) -> &GraphRoles {
        &self.roles
    }

    pub fn stream(&self) -> &MetricStream {
        &self.stream
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn into_parts(self) -> (NetworkGraph, MetricStream) {
        (self.graph, self.stream)
    }

    fn wall(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn set_lr(&mut self, lr: f64) {
        match &mut self.updater {
            Updater::ThreeStep(o) => o.set_lr(lr),
            Updater::Direct(o) => o.lr = lr,
        }
    }

    /// Runs one minibatch step. Returns `Stop` if a handler asked for it.
    pub fn step(&mut self, events: &mut Events<'_>) -> Result<Control> {
        if self.finished() {
            return Ok(Control::Stop);
        }
        let epoch = self.step / self.steps_per_epoch;
        if self.step % self.steps_per_epoch == 0 {
            let lr = self.cfg.schedule.lr_at(self.cfg.lr, epoch);
            self.set_lr(lr);
        }
        events.step = self.step;
        let mut control = Control::Continue;
        if !events.is_empty() {
            let snap = Snapshot::new(vec![self.graph.initializers()]);
            control = control.max(events.fire(EventKind::BeforeStep, &snap));
        }

        let (x, y) = self.sampler.sample_minibatch(Some(self.train), self.cfg.dtype)?;
        if let Updater::ThreeStep(opt) = &mut self.updater {
            opt.new_input()?;
            for p in &self.params {
                let cur = self.graph.initializer(p).expect("checked in new");
                if let Some(v) = opt.prepare_param(p, cur)? {
                    self.graph.feed(p, v)?;
                }
            }
        }
        let mut feeds = BTreeMap::new();
        feeds.insert(self.roles.data.clone(), x);
        let labels: Option<Vec<usize>> = match &self.roles.labels {
            Some(l) => {
                let ids = y.to_f64_vec().into_iter().map(|v| v as usize).collect();
                feeds.insert(l.clone(), y);
                Some(ids)
            }
            None => None,
        };
        let mut fetch = vec![self.roles.loss.as_str()];
        fetch.extend(self.roles.scores.as_deref());
        let ex = inference_and_backprop(&self.graph, &feeds, &fetch, &self.roles.loss, events)?;
        control = control.max(ex.control);
        let loss = ex.outputs[&self.roles.loss].get_f64(0);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }

        match &mut self.updater {
            Updater::ThreeStep(opt) => {
                for p in &self.params {
                    let old = self.graph.initializer(p).expect("checked in new");
                    let new = opt.update_rule(p, &ex.gradients[p], old)?;
                    *self.graph.initializer_mut(p).expect("checked in new") = new;
                }
            }
            Updater::Direct(opt) => {
                let mut params: BTreeMap<String, Tensor> = self
                    .params
                    .iter()
                    .map(|p| (p.clone(), self.graph.initializer(p).expect("checked in new").clone()))
                    .collect();
                opt.step(&mut params, &ex.gradients)?;
                for (p, v) in params {
                    *self.graph.initializer_mut(&p).expect("checked in new") = v;
                }
            }
        }
        if !events.is_empty() {
            let snap = Snapshot::new(vec![self.graph.initializers()]);
            control = control.max(events.fire(EventKind::AfterUpdate, &snap));
        }

        if self.cfg.instrument {
            let wall = self.wall();
            self.stream.push(self.step, epoch, "loss", loss, wall);
            if (self.step + 1) % self.cfg.train_accuracy_every == 0 {
                if let (Some(s), Some(l)) = (&self.roles.scores, &labels) {
                    let acc = count_correct(&ex.outputs[s], l)? as f64 / l.len() as f64;
                    let wall = self.wall();
                    self.stream.push(self.step, epoch, "train_accuracy", acc, wall);
                }
            }
        }
        self.step += 1;
        if self.cfg.instrument && self.step % self.steps_per_epoch == 0 {
            if let (Some(test), Some(_)) = (self.test, &self.roles.scores) {
                let acc = evaluate_accuracy(&self.graph, test, self.cfg.batch_size)?;
                let wall = self.wall();
                self.stream.push(self.step - 1, epoch, "test_accuracy", acc, wall);
            }
        }
        if !events.is_empty() {
            control = control.max(events.fire(EventKind::EarlyStopQuery, &Snapshot::empty()));
        }
        Ok(control)
    }

    /// Steps until done or stopped.
    pub fn run(mut self, events: &mut Events<'_>) -> Result<(NetworkGraph, MetricStream)> {
        while !self.finished() {
            if self.step(events)? == Control::Stop {
                break;
            }
        }
        Ok(self.into_parts())
    }
}

/// Trains `g` on `train` and returns the trained graph with its metric
/// stream. TestAccuracy is recorded after each epoch when `test` is given.
pub fn train(
    g: NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainingConfig,
    events: &mut Events<'_>,
) -> Result<(NetworkGraph, MetricStream)> {
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        cfg.validate()?;
        return Ok((g, MetricStream::default()));
    }
    Trainer::new(g, train, test, cfg.clone())?.run(events)
}

/// Fraction of `ds` whose score argmax equals the label, evaluated in
/// batches of `batch` (the last one may be short).
pub fn evaluate_accuracy(g: &NetworkGraph, ds: &Dataset, batch: usize) -> Result<f64> {
    let roles = GraphRoles::detect(g)?;
    let scores = match &roles.scores {
        Some(s) => s.clone(),
        None => g.outputs().first().cloned().ok_or_else(|| Error::InvalidArgument("graph declares no outputs".into()))?,
    };
    evaluate_accuracy_on(g, ds, batch, &roles.data, &scores)
}

/// [`evaluate_accuracy`] with explicit input and score edges.
pub fn evaluate_accuracy_on(g: &NetworkGraph, ds: &Dataset, batch: usize, data: &str, scores: &str) -> Result<f64> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if ds.is_empty() {
        return Ok(0.0);
    }
    let n = ds.len();
    let chunks = n.div_ceil(batch);
    let dtype = graph_dtype(g);
    let per_item = ds.item_shape().iter().product::<usize>().max(1);
    let counts = par::map_range(chunks, n * per_item * 64, |c| -> Result<usize> {
        let idx: Vec<usize> = (c * batch..((c + 1) * batch).min(n)).collect();
        let (x, _) = ds.batch(&idx, dtype)?;
        let mut feeds = BTreeMap::new();
        feeds.insert(data.to_string(), x);
        let ex = inference(g, &feeds, &[scores], &mut Events::new())?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        count_correct(&ex.outputs[scores], &labels)
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / n as f64)
}

/// Histogram of labels drawn by `sampler` over `epochs` epochs.
pub fn dataset_bias(sampler: &mut Sampler, ds: Option<&Dataset>, epochs: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0; sampler.classes(ds)?];
    let steps = sampler.steps_per_epoch(ds)? * epochs;
    for _ in 0..steps {
        for l in sampler.next_labels(ds)? {
            hist[l] += 1;
        }
    }
    Ok(hist)
}

/// Wallclock of building one minibatch, over `runs` timed runs.
pub fn measure_dataset_latency(sampler: &mut Sampler, ds: Option<&Dataset>, dtype: DType, runs: usize) -> Result<Repeated> {
    sampler.epoch_len(ds)?;
    run_repeated("dataset_latency", runs, |_| {
        let (x, _) = sampler.sample_minibatch(ds, dtype)?;
        std::hint::black_box(&x);
        Ok(())
    })
    .map_err(|a| a.source)
}
