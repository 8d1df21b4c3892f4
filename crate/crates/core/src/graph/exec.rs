//! Reference executor: forward in topological order, backward in reverse.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use super::events::{Control, EventKind, Events, Snapshot};
use super::NetworkGraph;
use crate::error::GraphError;
use crate::operators::Operator;
use crate::tensor::{elementwise, ElementwiseOp};
use crate::{Error, Result, Tensor};

/// Per-node wallclock of operator calls, in execution order.
#[derive(Debug, Default, Clone)]
pub struct NodeTimes {
    pub entries: Vec<(String, Duration)>,
}

impl NodeTimes {
    pub fn total(&self) -> Duration {
        self.entries.iter().map(|(_, d)| *d).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    /// Requested edges (declared outputs unless a fetch list was given).
    pub outputs: BTreeMap<String, Tensor>,
    /// Gradient of the loss for every parameter, keyed by parameter name.
    pub gradients: BTreeMap<String, Tensor>,
    pub control: Control,
}

fn wrap(node: &str, e: Error) -> Error {
    Error::Node { node: node.to_string(), source: Box::new(e) }
}

struct Run<'a> {
    g: &'a NetworkGraph,
    feeds: &'a BTreeMap<String, Tensor>,
    values: BTreeMap<String, Tensor>,
}

impl<'a> Run<'a> {
    fn get(&self, edge: &str) -> Result<&Tensor> {
        self.values
            .get(edge)
            .or_else(|| self.feeds.get(edge))
            .or_else(|| self.g.stored_feeds().get(edge))
            .or_else(|| self.g.initializer(edge))
            .ok_or_else(|| {
                if self.g.is_known_edge(edge) {
                    GraphError::MissingFeed(edge.to_string()).into()
                } else {
                    GraphError::UnknownEdge(edge.to_string()).into()
                }
            })
    }
}

/// Nodes needed to compute `targets`, in topological order.
fn needed_nodes(g: &NetworkGraph, targets: &[&str]) -> Result<Vec<usize>> {
    let order = g.topological_order()?;
    let producer: HashMap<&str, usize> = g
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(i, n)| n.outputs.iter().map(move |o| (o.as_str(), i)))
        .collect();
    let mut needed = HashSet::new();
    let mut stack: Vec<&str> = targets.to_vec();
    while let Some(e) = stack.pop() {
        if !g.is_known_edge(e) {
            return Err(GraphError::UnknownEdge(e.to_string()).into());
        }
        if let Some(&p) = producer.get(e) {
            if needed.insert(p) {
                stack.extend(g.nodes()[p].inputs.iter().map(String::as_str));
            }
        }
    }
    Ok(order.into_iter().filter(|i| needed.contains(i)).collect())
}

fn forward(
    run: &mut Run<'_>,
    order: &[usize],
    mut timer: Option<&mut NodeTimes>,
) -> Result<()> {
    for &idx in order {
        let node = &run.g.nodes()[idx];
        let inputs: Vec<&Tensor> = node.inputs.iter().map(|e| run.get(e)).collect::<Result<_>>()?;
        let t0 = Instant::now();
        let outs = node.op.forward(&inputs).map_err(|e| wrap(&node.name, e))?;
        if let Some(t) = timer.as_deref_mut() {
            t.entries.push((node.name.clone(), t0.elapsed()));
        }
        for (e, v) in node.outputs.iter().zip(outs) {
            run.values.insert(e.clone(), v);
        }
    }
    Ok(())
}

/// Runs the graph forward. `fetch` selects edges to return; empty means the
/// declared outputs. Only nodes needed for the fetched edges execute.
pub fn inference(
    g: &NetworkGraph,
    feeds: &BTreeMap<String, Tensor>,
    fetch: &[&str],
    events: &mut Events<'_>,
) -> Result<Execution> {
    execute(g, feeds, fetch, None, events, None)
}

/// Forward and backward pass for a scalar loss edge.
pub fn inference_and_backprop(
    g: &NetworkGraph,
    feeds: &BTreeMap<String, Tensor>,
    fetch: &[&str],
    loss: &str,
    events: &mut Events<'_>,
) -> Result<Execution> {
    execute(g, feeds, fetch, Some(loss), events, None)
}

pub(crate) fn execute(
    g: &NetworkGraph,
    feeds: &BTreeMap<String, Tensor>,
    fetch: &[&str],
    loss: Option<&str>,
    events: &mut Events<'_>,
    mut timer: Option<&mut NodeTimes>,
) -> Result<Execution> {
    let declared: Vec<&str> = g.outputs().iter().map(String::as_str).collect();
    let fetch: Vec<&str> = if fetch.is_empty() { declared } else { fetch.to_vec() };
    let mut targets = fetch.clone();
    targets.extend(loss);
    let order = needed_nodes(g, &targets)?;
    let mut run = Run { g, feeds, values: BTreeMap::new() };
    forward(&mut run, &order, timer.as_deref_mut())?;

    let mut control = Control::Continue;
    if !events.is_empty() {
        let snap = Snapshot::new(vec![&run.values, feeds, g.initializers()]);
        if events.fire(EventKind::AfterInference, &snap) == Control::Stop {
            control = Control::Stop;
        }
    }

    let gradients = match loss {
        Some(loss) => backward(&run, &order, loss, timer)?,
        None => BTreeMap::new(),
    };
    if loss.is_some() && !events.is_empty() {
        let named: BTreeMap<String, Tensor> = gradients
            .iter()
            .map(|(p, t)| {
                let edge = g.gradient_pairs().get(p).cloned().unwrap_or_else(|| format!("{p}.grad"));
                (edge, t.clone())
            })
            .collect();
        let snap = Snapshot::new(vec![&run.values, feeds, g.initializers(), &named]);
        if events.fire(EventKind::AfterBackprop, &snap) == Control::Stop {
            control = Control::Stop;
        }
    }
    let outputs = fetch
        .iter()
        .map(|&e| Ok((e.to_string(), run.get(e)?.clone())))
        .collect::<Result<_>>()?;
    Ok(Execution { outputs, gradients, control })
}

/// Sums contributions in node-insertion order.
fn take(pending: &mut HashMap<String, Vec<(usize, Tensor)>>, edge: &str) -> Result<Option<Tensor>> {
    let Some(mut parts) = pending.remove(edge) else {
        return Ok(None);
    };
    parts.sort_by_key(|(i, _)| *i);
    let mut it = parts.into_iter().map(|(_, t)| t);
    let mut acc = it.next().unwrap();
    for t in it {
        acc = elementwise(ElementwiseOp::Add, &acc, Some(&t))?;
    }
    Ok(Some(acc))
}

fn backward(
    run: &Run<'_>,
    order: &[usize],
    loss: &str,
    mut timer: Option<&mut NodeTimes>,
) -> Result<BTreeMap<String, Tensor>> {
    let g = run.g;
    let loss_value = run.get(loss)?;
    if loss_value.numel() != 1 {
        return Err(GraphError::NonScalarLoss(loss.to_string()).into());
    }
    // Edges that depend on some parameter.
    let mut requires: HashSet<&str> = g.initializers().keys().map(String::as_str).collect();
    for &idx in order {
        let n = &g.nodes()[idx];
        let diff = n.op.differentiable_inputs(n.inputs.len());
        if n.inputs.iter().zip(&diff).any(|(e, &d)| d && requires.contains(e.as_str())) {
            requires.extend(n.outputs.iter().map(String::as_str));
        }
    }
    let mut pending: HashMap<String, Vec<(usize, Tensor)>> = HashMap::new();
    pending.insert(
        loss.to_string(),
        vec![(usize::MAX, Tensor::full(loss_value.dtype(), loss_value.shape().to_vec(), 1.0))],
    );
    for &idx in order.iter().rev() {
        let n = &g.nodes()[idx];
        if !n.outputs.iter().any(|o| requires.contains(o.as_str())) {
            continue;
        }
        let mut grads = Vec::with_capacity(n.outputs.len());
        let mut any = false;
        for o in &n.outputs {
            let gr = take(&mut pending, o)?;
            any |= gr.is_some();
            grads.push(gr);
        }
        if !any {
            continue;
        }
        let outs: Vec<&Tensor> = n.outputs.iter().map(|e| run.get(e)).collect::<Result<_>>()?;
        let grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&outs)
            .map(|(gr, o)| gr.unwrap_or_else(|| Tensor::zeros(o.dtype(), o.shape().to_vec())))
            .collect();
        let ins: Vec<&Tensor> = n.inputs.iter().map(|e| run.get(e)).collect::<Result<_>>()?;
        let grefs: Vec<&Tensor> = grads.iter().collect();
        let t0 = Instant::now();
        let res = n.op.backward(&grefs, &ins, &outs).map_err(|e| wrap(&n.name, e))?;
        if let Some(t) = timer.as_deref_mut() {
            t.entries.push((format!("{}.backward", n.name), t0.elapsed()));
        }
        for (e, gr) in n.inputs.iter().zip(res) {
            if let Some(gr) = gr {
                if requires.contains(e.as_str()) {
                    pending.entry(e.clone()).or_default().push((idx, gr));
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for (name, p) in g.initializers() {
        let gr = take(&mut pending, name)?.unwrap_or_else(|| Tensor::zeros(p.dtype(), p.shape().to_vec()));
        out.insert(name.clone(), gr);
    }
    Ok(out)
}
