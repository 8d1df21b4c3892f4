//! Network graphs: structure, edits, topological order, execution, model
//! documents and graph transformations.

mod check;
mod events;
mod exec;
pub mod microbatch;
pub mod model;
mod overhead;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;

use crate::error::GraphError;
use crate::operators::OpKind;
use crate::{DType, Error, Result, Tensor, TensorDesc};

pub use check::{check_graph_gradients, GraphGradReport};
pub use events::{Control, EventKind, Events, Snapshot};
pub use exec::{inference, inference_and_backprop, Execution, NodeTimes};
pub use microbatch::{microbatch_transform, CostModel};
pub use model::{load_model, save_model};
pub use overhead::{framework_overhead, OverheadReport};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        op: OpKind,
        inputs: impl IntoIterator<Item = S>,
        outputs: impl IntoIterator<Item = S>,
    ) -> Self {
        Node {
            name: name.into(),
            op,
            inputs: inputs.into_iter().map(Into::into).collect(),
            outputs: outputs.into_iter().map(Into::into).collect(),
        }
    }
}

/// Structural edit applied through [`NetworkGraph::edit`].
#[derive(Debug, Clone)]
pub enum EditAction {
    AddNode(Node),
    RemoveNode(String),
    Feed(String, Tensor),
    Fetch(String),
}

#[derive(Debug, Clone)]
pub enum EditResult {
    Done,
    Removed(Node),
    Fetched(Tensor),
}

/// A network as a DAG of operator nodes connected by named edges.
///
/// Edges are produced by exactly one node, or are graph inputs or
/// initializers (parameters). Nodes keep their insertion order, which breaks
/// ties in the topological order and fixes gradient summation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkGraph {
    nodes: Vec<Node>,
    initializers: BTreeMap<String, Tensor>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    gradient_pairs: BTreeMap<String, String>,
    feeds: BTreeMap<String, Tensor>,
}

impl NetworkGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds and validates a whole graph at once; nodes may be listed in any
    /// order as long as the result is acyclic.
    pub fn from_parts(
        nodes: Vec<Node>,
        initializers: BTreeMap<String, Tensor>,
        inputs: Vec<String>,
        outputs: Vec<String>,
        gradient_pairs: BTreeMap<String, String>,
    ) -> Result<Self> {
        let g = NetworkGraph {
            nodes,
            initializers,
            inputs,
            outputs,
            gradient_pairs,
            feeds: BTreeMap::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn initializers(&self) -> &BTreeMap<String, Tensor> {
        &self.initializers
    }

    pub fn initializer(&self, name: &str) -> Option<&Tensor> {
        self.initializers.get(name)
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn gradient_pairs(&self) -> &BTreeMap<String, String> {
        &self.gradient_pairs
    }

    /// Values stored with [`NetworkGraph::feed`] for graph inputs.
    pub fn stored_feeds(&self) -> &BTreeMap<String, Tensor> {
        &self.feeds
    }

    pub fn add_input(&mut self, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if let Some(p) = self.producer_of(&name) {
            return Err(GraphError::DuplicateProducer { edge: name, producer: p }.into());
        }
        self.inputs.push(name);
        Ok(())
    }

    /// Adds a parameter; its gradient edge defaults to `<name>.grad`.
    pub fn add_initializer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if let Some(p) = self.producer_of(&name) {
            return Err(GraphError::DuplicateProducer { edge: name, producer: p }.into());
        }
        self.gradient_pairs.insert(name.clone(), format!("{name}.grad"));
        self.initializers.insert(name, value);
        Ok(())
    }

    /// Copy with every initializer and stored feed converted to `dtype`.
    pub fn cast(&self, dtype: DType) -> NetworkGraph {
        let mut g = self.clone();
        for t in g.initializers.values_mut().chain(g.feeds.values_mut()) {
            *t = t.cast(dtype);
        }
        g
    }

    /// Adds an initializer without a gradient pair; training leaves it fixed.
    pub fn add_constant(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if let Some(p) = self.producer_of(&name) {
            return Err(GraphError::DuplicateProducer { edge: name, producer: p }.into());
        }
        self.initializers.insert(name, value);
        Ok(())
    }

    pub fn add_output(&mut self, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if !self.is_known_edge(&name) {
            return Err(GraphError::UnknownEdge(name).into());
        }
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
        Ok(())
    }

    pub fn set_outputs(&mut self, outputs: Vec<String>) -> Result<()> {
        for o in &outputs {
            if !self.is_known_edge(o) {
                return Err(GraphError::UnknownEdge(o.clone()).into());
            }
        }
        self.outputs = outputs;
        Ok(())
    }

    /// Name of the producer of `edge`: a node name, `input` or `initializer`.
    fn producer_of(&self, edge: &str) -> Option<String> {
        if self.inputs.iter().any(|i| i == edge) {
            return Some("graph input".into());
        }
        if self.initializers.contains_key(edge) {
            return Some("initializer".into());
        }
        self.nodes
            .iter()
            .find(|n| n.outputs.iter().any(|o| o == edge))
            .map(|n| n.name.clone())
    }

    pub fn is_known_edge(&self, edge: &str) -> bool {
        self.producer_of(edge).is_some()
    }

    /// Appends a node. Its inputs must already exist, so the only way to
    /// introduce a cycle is for a node to consume its own output.
    pub fn add_node(&mut self, node: Node) -> Result<()> {
        if self.nodes.iter().any(|n| n.name == node.name) {
            return Err(GraphError::DuplicateNode(node.name).into());
        }
        if node.inputs.iter().any(|i| node.outputs.contains(i)) {
            return Err(GraphError::Cycle(node.name).into());
        }
        let mut seen = BTreeSet::new();
        for o in &node.outputs {
            if !seen.insert(o) {
                return Err(GraphError::DuplicateProducer { edge: o.clone(), producer: node.name.clone() }.into());
            }
            if let Some(p) = self.producer_of(o) {
                return Err(GraphError::DuplicateProducer { edge: o.clone(), producer: p }.into());
            }
        }
        for i in &node.inputs {
            if !self.is_known_edge(i) {
                return Err(GraphError::UnknownEdge(i.clone()).into());
            }
        }
        let (lo, hi) = node.op.input_arity();
        if node.inputs.len() < lo || node.inputs.len() > hi || node.outputs.len() != node.op.output_count() {
            return Err(Error::Node {
                node: node.name.clone(),
                source: Box::new(Error::op(
                    node.op.name(),
                    format!("{} inputs / {} outputs do not fit the operator", node.inputs.len(), node.outputs.len()),
                )),
            });
        }
        self.nodes.push(node);
        Ok(())
    }

    /// Removes a node whose outputs are no longer consumed.
    pub fn remove_node(&mut self, name: &str) -> Result<Node> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| GraphError::UnknownNode(name.to_string()))?;
        for o in &self.nodes[idx].outputs {
            if let Some(c) = self.nodes.iter().find(|n| n.inputs.contains(o)) {
                return Err(GraphError::EdgeInUse { edge: o.clone(), consumer: c.name.clone() }.into());
            }
            if self.outputs.contains(o) {
                return Err(GraphError::EdgeInUse { edge: o.clone(), consumer: "graph output".into() }.into());
            }
        }
        Ok(self.nodes.remove(idx))
    }

    /// Stores a value for a parameter or graph input. Parameters keep their
    /// descriptor.
    pub fn feed(&mut self, edge: &str, value: Tensor) -> Result<()> {
        if let Some(old) = self.initializers.get_mut(edge) {
            if old.desc() != value.desc() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{edge}` is {:?} {}, fed {:?} {}",
                    old.shape(),
                    old.dtype(),
                    value.shape(),
                    value.dtype()
                )));
            }
            *old = value;
            return Ok(());
        }
        if self.inputs.iter().any(|i| i == edge) {
            self.feeds.insert(edge.to_string(), value);
            return Ok(());
        }
        Err(GraphError::UnknownEdge(edge.to_string()).into())
    }

    /// Returns a stored parameter or fed input.
    pub fn fetch(&self, edge: &str) -> Result<Tensor> {
        self.initializers
            .get(edge)
            .or_else(|| self.feeds.get(edge))
            .cloned()
            .ok_or_else(|| {
                if self.is_known_edge(edge) {
                    GraphError::MissingFeed(edge.to_string()).into()
                } else {
                    GraphError::UnknownEdge(edge.to_string()).into()
                }
            })
    }

    pub fn initializer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.initializers.get_mut(name)
    }

    pub fn edit(&mut self, action: EditAction) -> Result<EditResult> {
        match action {
            EditAction::AddNode(n) => self.add_node(n).map(|_| EditResult::Done),
            EditAction::RemoveNode(name) => self.remove_node(&name).map(EditResult::Removed),
            EditAction::Feed(edge, t) => self.feed(&edge, t).map(|_| EditResult::Done),
            EditAction::Fetch(edge) => self.fetch(&edge).map(EditResult::Fetched),
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let mut producers: HashMap<&str, &str> = HashMap::new();
        for i in &self.inputs {
            if producers.insert(i, "graph input").is_some() {
                return Err(GraphError::DuplicateProducer { edge: i.clone(), producer: "graph input".into() }.into());
            }
        }
        for i in self.initializers.keys() {
            if let Some(p) = producers.insert(i, "initializer") {
                return Err(GraphError::DuplicateProducer { edge: i.clone(), producer: p.into() }.into());
            }
        }
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return Err(GraphError::DuplicateNode(n.name.clone()).into());
            }
            for o in &n.outputs {
                if let Some(p) = producers.insert(o, &n.name) {
                    return Err(GraphError::DuplicateProducer { edge: o.clone(), producer: p.into() }.into());
                }
            }
        }
        for n in &self.nodes {
            for i in &n.inputs {
                if !producers.contains_key(i.as_str()) {
                    return Err(GraphError::UnknownEdge(i.clone()).into());
                }
            }
        }
        for o in &self.outputs {
            if !producers.contains_key(o.as_str()) {
                return Err(GraphError::Unreachable(o.clone()).into());
            }
        }
        for (p, g) in &self.gradient_pairs {
            if !self.initializers.contains_key(p) {
                return Err(GraphError::UnknownEdge(p.clone()).into());
            }
            if producers.contains_key(g.as_str()) {
                return Err(GraphError::DuplicateProducer { edge: g.clone(), producer: producers[g.as_str()].into() }.into());
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Node indices such that every node follows the producers of its inputs.
    /// Among ready nodes the earliest inserted goes first.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let producer: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.outputs.iter().map(move |o| (o.as_str(), i)))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for e in &n.inputs {
                if let Some(&p) = producer.get(e.as_str()) {
                    indegree[i] += 1;
                    consumers[p].push(i);
                }
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(GraphError::Cycle(self.nodes[stuck].name.clone()).into());
        }
        Ok(order)
    }

    /// Names of nodes in topological order.
    pub fn topological_names(&self) -> Result<Vec<String>> {
        Ok(self.topological_order()?.into_iter().map(|i| self.nodes[i].name.clone()).collect())
    }

    /// Descriptors of every edge given descriptors of the graph inputs.
    pub fn infer_shapes(&self, inputs: &BTreeMap<String, TensorDesc>) -> Result<BTreeMap<String, TensorDesc>> {
        let mut descs: BTreeMap<String, TensorDesc> =
            self.initializers.iter().map(|(k, v)| (k.clone(), v.desc())).collect();
        for i in &self.inputs {
            let d = inputs
                .get(i)
                .cloned()
                .or_else(|| self.feeds.get(i).map(Tensor::desc))
                .ok_or_else(|| GraphError::MissingFeed(i.clone()))?;
            descs.insert(i.clone(), d);
        }
        for idx in self.topological_order()? {
            let n = &self.nodes[idx];
            let ins: Vec<TensorDesc> = n.inputs.iter().map(|e| descs[e].clone()).collect();
            let outs = n.op.infer(&ins).map_err(|e| Error::Node { node: n.name.clone(), source: Box::new(e) })?;
            for (e, d) in n.outputs.iter().zip(outs) {
                descs.insert(e.clone(), d);
            }
        }
        Ok(descs)
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut Vec<Node> {
        &mut self.nodes
    }

    /// Total bytes held by parameters.
    pub fn parameter_bytes(&self) -> usize {
        self.initializers.values().map(Tensor::size_bytes).sum()
    }
}
