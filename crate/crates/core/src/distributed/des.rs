//! Single-threaded discrete-event simulation of the asynchronous
//! parameter-server schemes.
//!
//! Rank 0 hosts the server next to its own worker. A worker computes its
//! gradient when it starts a step, pushes it, and waits for parameters. In
//! `asgd` the server applies every gradient on arrival and replies at once.
//! In `ssp(s)` the server applies the ring-order mean of all gradients of a
//! step once the last one arrives, and only replies to a worker about to
//! start step `t` when at least `t − s` steps are applied. With `s = 0` this
//! is the consistent parameter server.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::comm::{ring_order_average, Meter};
use super::wire::{decode_dense, encode_dense, Frame, MsgType};
use super::{params_of, DistConfig, DistRun, Layout, Scheme};
use crate::data_io::Dataset;
use crate::graph::{inference_and_backprop, Events, NetworkGraph};
use crate::training::{evaluate_accuracy, GraphRoles, MetricStream, OptimizerKind, Sampler, UpdateRuleOptimizer};
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    /// A worker began computing a step.
    Start,
    /// The server received a worker's gradient for a step.
    Push,
    /// The server applied an update.
    Apply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time_ns: u64,
    pub worker: usize,
    pub step: usize,
    pub kind: LogKind,
}

/// Largest lead of a worker starting step `t` over the least advanced
/// worker, whose progress is the number of gradients it has pushed.
pub fn max_step_spread(log: &[LogEvent], workers: usize) -> usize {
    let mut pushed = vec![0usize; workers];
    let mut spread = 0;
    for e in log {
        match e.kind {
            LogKind::Push => pushed[e.worker] = e.step + 1,
            LogKind::Start => {
                let slowest = pushed.iter().copied().min().unwrap_or(0);
                spread = spread.max(e.step.saturating_sub(slowest));
            }
            LogKind::Apply => {}
        }
    }
    spread
}

type Grads = BTreeMap<String, Tensor>;

enum Ev {
    Start(usize),
    Arrive { worker: usize, step: usize, frames: Vec<Vec<u8>> },
    Reply { worker: usize, frames: Vec<Vec<u8>> },
}

struct Worker<'d> {
    graph: NetworkGraph,
    sampler: Sampler,
    data: &'d Dataset,
    step: usize,
    rng: Rng,
    meter: Meter,
}

struct Sim<'d> {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending_events: BTreeMap<u64, Ev>,
    workers: Vec<Worker<'d>>,
    server: BTreeMap<String, Tensor>,
    opt: UpdateRuleOptimizer,
    applied: usize,
    clocks: BTreeMap<usize, Vec<Option<Grads>>>,
    waiting: Vec<(usize, usize)>,
    log: Vec<LogEvent>,
    stream: MetricStream,
}

fn encode(worker: usize, ty: MsgType, step: usize, params: &[String], values: &Grads) -> Vec<Vec<u8>> {
    params
        .iter()
        .enumerate()
        .map(|(tid, n)| Frame::new(ty, worker, step as u64, tid as u32, encode_dense(&values[n])).encode())
        .collect()
}

fn decode(frames: &[Vec<u8>], params: &[String], like: &BTreeMap<String, Tensor>) -> Result<Grads> {
    frames
        .iter()
        .zip(params)
        .map(|(f, n)| {
            let f = Frame::decode(f)?;
            let t = &like[n];
            Ok((n.clone(), decode_dense(&f.payload, t.dtype(), t.shape())?))
        })
        .collect()
}

pub(crate) fn run_simulated(
    g: &NetworkGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    layout: &Layout,
    dist: &DistConfig,
    params: &[String],
    total: usize,
) -> Result<DistRun> {
    let p = dist.workers;
    let cfg = &layout.cfg;
    let OptimizerKind::Rule(rule) = cfg.optimizer else {
        return Err(Error::InvalidArgument("the simulated server needs an update-rule optimizer".into()));
    };
    let roles = GraphRoles::detect(g)?;
    let steps_per_epoch = layout.sampler(0, p)?.steps_per_epoch(Some(layout.data(train, 0)))?;
    let init = params_of(g, params);
    let param_bytes: usize = init.values().map(Tensor::size_bytes).sum();
    let mut workers = Vec::with_capacity(p);
    for rank in 0..p {
        let mut meter = Meter::new(rank);
        if rank > 0 {
            // Initial parameters come from rank 0.
            meter.received(param_bytes);
        }
        workers.push(Worker {
            graph: g.clone(),
            sampler: layout.sampler(rank, p)?,
            data: layout.data(train, rank),
            step: 0,
            rng: Rng::new(dist.delays.seed, rank as u64),
            meter,
        });
    }
    for _ in 1..p {
        workers[0].meter.sent(param_bytes);
    }
    workers.iter_mut().for_each(|w| w.meter.close());
    let mut sim = Sim {
        now: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        pending_events: BTreeMap::new(),
        workers,
        server: init,
        opt: UpdateRuleOptimizer::new(rule, cfg.lr)?.checked(cfg.checked),
        applied: 0,
        clocks: BTreeMap::new(),
        waiting: Vec::new(),
        log: Vec::new(),
        stream: MetricStream::default(),
    };
    let staleness = match dist.scheme {
        Scheme::Ssp { staleness } => Some(staleness),
        _ => None,
    };
    let ctx = Ctx { roles: &roles, params, cfg, dist, total, steps_per_epoch, staleness };
    if dist.delays.round_robin {
        sim.run_round_robin(&ctx)?;
    } else {
        for m in 0..p {
            sim.schedule(0, Ev::Start(m));
        }
        while let Some(Reverse((t, id))) = sim.queue.pop() {
            sim.now = t;
            let ev = sim.pending_events.remove(&id).expect("queued events are stored");
            sim.handle(&ctx, ev)?;
        }
    }
    let mut graph = g.clone();
    for (n, v) in &sim.server {
        *graph.initializer_mut(n).expect("trainable parameters have initializers") = v.clone();
    }
    if cfg.instrument {
        if let (Some(test), Some(_)) = (test, &roles.scores) {
            let acc = evaluate_accuracy(&graph, test, cfg.batch_size)?;
            sim.stream.push(total - 1, (total - 1) / steps_per_epoch, "test_accuracy", acc, sim.now);
        }
    }
    Ok(DistRun {
        scheme: dist.scheme,
        workers: p,
        steps: total,
        replicas: sim.workers.iter().map(|w| params_of(&w.graph, params)).collect(),
        stats: sim.workers.iter().map(|w| w.meter.stats.clone()).collect(),
        graph,
        stream: sim.stream,
        log: sim.log,
    })
}

struct Ctx<'a> {
    roles: &'a GraphRoles,
    params: &'a [String],
    cfg: &'a crate::training::TrainingConfig,
    dist: &'a DistConfig,
    total: usize,
    steps_per_epoch: usize,
    staleness: Option<usize>,
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.pending_events.insert(self.seq, ev);
    }

    fn latency(&self, ctx: &Ctx<'_>, worker: usize) -> u64 {
        if worker == 0 {
            0
        } else {
            ctx.dist.delays.latency_ns
        }
    }

    /// Computes worker `m`'s gradient for its current step and returns the
    /// encoded push.
    fn compute(&mut self, ctx: &Ctx<'_>, m: usize) -> Result<Vec<Vec<u8>>> {
        let w = &mut self.workers[m];
        let step = w.step;
        self.log.push(LogEvent { time_ns: self.now, worker: m, step, kind: LogKind::Start });
        let (x, y) = w.sampler.sample_minibatch(Some(w.data), ctx.cfg.dtype)?;
        let mut feeds = BTreeMap::new();
        feeds.insert(ctx.roles.data.clone(), x);
        if let Some(l) = &ctx.roles.labels {
            feeds.insert(l.clone(), y);
        }
        let loss_edge = ctx.roles.loss.as_str();
        let ex = inference_and_backprop(&w.graph, &feeds, &[loss_edge], loss_edge, &mut Events::new())?;
        let loss = ex.outputs[loss_edge].get_f64(0);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if m == 0 && ctx.cfg.instrument {
            self.stream.push(step, step / ctx.steps_per_epoch, "loss", loss, self.now);
        }
        let grads: Grads = ctx.params.iter().map(|n| (n.clone(), ex.gradients[n].clone())).collect();
        let frames = encode(m, MsgType::GradPush, step, ctx.params, &grads);
        let bytes: usize = grads.values().map(Tensor::size_bytes).sum();
        w.meter.logical(2 * bytes);
        if m != 0 {
            for f in &frames {
                let len = f.len() - super::HEADER_LEN;
                self.workers[m].meter.sent(len);
                self.workers[0].meter.received(len);
            }
        }
        Ok(frames)
    }

    fn apply(&mut self, ctx: &Ctx<'_>, worker: usize, step: usize, grads: &Grads) -> Result<()> {
        self.opt.lr = ctx.cfg.schedule.lr_at(ctx.cfg.lr, step / ctx.steps_per_epoch);
        self.opt.step(&mut self.server, grads)?;
        self.applied += 1;
        self.log.push(LogEvent { time_ns: self.now, worker, step, kind: LogKind::Apply });
        Ok(())
    }

    fn reply(&mut self, ctx: &Ctx<'_>, m: usize) -> Vec<Vec<u8>> {
        let step = self.workers[m].step;
        let frames = encode(0, MsgType::ParamBcast, step, ctx.params, &self.server);
        if m != 0 {
            for f in &frames {
                let len = f.len() - super::HEADER_LEN;
                self.workers[0].meter.sent(len);
                self.workers[m].meter.received(len);
            }
        }
        frames
    }

    /// Installs parameters on worker `m` and closes its step.
    fn receive(&mut self, ctx: &Ctx<'_>, m: usize, frames: &[Vec<u8>]) -> Result<()> {
        let fresh = decode(frames, ctx.params, &self.server)?;
        let w = &mut self.workers[m];
        for (n, v) in fresh {
            *w.graph.initializer_mut(&n).expect("trainable parameters have initializers") = v;
        }
        w.step += 1;
        w.meter.close();
        Ok(())
    }

    fn handle(&mut self, ctx: &Ctx<'_>, ev: Ev) -> Result<()> {
        match ev {
            Ev::Start(m) => {
                let frames = self.compute(ctx, m)?;
                let [lo, hi] = ctx.dist.delays.compute_ns;
                let latency = self.latency(ctx, m);
                let w = &mut self.workers[m];
                let busy = lo + (w.rng.uniform() * (hi - lo) as f64) as u64;
                let at = self.now + busy + latency;
                let step = w.step;
                self.schedule(at, Ev::Arrive { worker: m, step, frames });
            }
            Ev::Arrive { worker, step, frames } => {
                self.log.push(LogEvent { time_ns: self.now, worker, step, kind: LogKind::Push });
                let grads = decode(&frames, ctx.params, &self.server)?;
                match ctx.staleness {
                    None => {
                        self.apply(ctx, worker, step, &grads)?;
                        let frames = self.reply(ctx, worker);
                        let at = self.now + self.latency(ctx, worker);
                        self.schedule(at, Ev::Reply { worker, frames });
                    }
                    Some(s) => {
                        let p = self.workers.len();
                        self.clocks.entry(step).or_insert_with(|| vec![None; p])[worker] = Some(grads);
                        while self.clocks.get(&self.applied).is_some_and(|c| c.iter().all(Option::is_some)) {
                            let clock = self.applied;
                            let all: Vec<Grads> =
                                self.clocks.remove(&clock).unwrap().into_iter().map(Option::unwrap).collect();
                            let mean: Grads = ctx
                                .params
                                .iter()
                                .map(|n| {
                                    let parts: Vec<&Tensor> = all.iter().map(|g| &g[n]).collect();
                                    Ok((n.clone(), ring_order_average(&parts)?))
                                })
                                .collect::<Result<_>>()?;
                            self.apply(ctx, 0, clock, &mean)?;
                        }
                        self.waiting.push((worker, (step + 1).saturating_sub(s)));
                        let ready: Vec<usize> =
                            self.waiting.iter().filter(|&&(_, need)| need <= self.applied).map(|&(m, _)| m).collect();
                        self.waiting.retain(|&(_, need)| need > self.applied);
                        for m in ready {
                            let frames = self.reply(ctx, m);
                            let at = self.now + self.latency(ctx, m);
                            self.schedule(at, Ev::Reply { worker: m, frames });
                        }
                    }
                }
            }
            Ev::Reply { worker, frames } => {
                self.receive(ctx, worker, &frames)?;
                if self.workers[worker].step < ctx.total {
                    self.schedule(self.now, Ev::Start(worker));
                }
            }
        }
        Ok(())
    }

    /// Workers take turns: each computes on the newest parameters and the
    /// server applies its gradient before the next worker starts.
    fn run_round_robin(&mut self, ctx: &Ctx<'_>) -> Result<()> {
        for _ in 0..ctx.total {
            for m in 0..self.workers.len() {
                let frames = self.reply(ctx, m);
                let step = self.workers[m].step;
                // The parameters a worker starts from are those of the
                // previous reply; refresh them before computing.
                let fresh = decode(&frames, ctx.params, &self.server)?;
                for (n, v) in fresh {
                    *self.workers[m].graph.initializer_mut(&n).unwrap() = v;
                }
                let push = self.compute(ctx, m)?;
                self.log.push(LogEvent { time_ns: self.now, worker: m, step, kind: LogKind::Push });
                let grads = decode(&push, ctx.params, &self.server)?;
                self.apply(ctx, m, step, &grads)?;
                self.workers[m].step += 1;
                self.workers[m].meter.close();
                self.now += 1;
            }
        }
        Ok(())
    }
}
