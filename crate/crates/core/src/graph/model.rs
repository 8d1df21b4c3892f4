//! JSON model documents.
//!
//! Loading parses the document into a JSON tree first (syntax errors carry
//! line and column), then walks it with a [`ModelVisitor`]; every value is
//! addressed by a JSON path in diagnostics. Saving is canonical: keys sorted,
//! nodes in insertion order, tensors as base64 little-endian bytes.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Map, Value};

use super::{NetworkGraph, Node};
use crate::error::ModelError;
use crate::operators::{AttrValue, ConvAttrs, OpKind, PoolAttrs};
use crate::{DType, Error, Result, Tensor, MODEL_SCHEMA_VERSION};

/// Callbacks invoked while walking a model document, one per supported
/// operator plus the graph-level declarations.
pub trait ModelVisitor {
    fn visit_initializer(&mut self, name: String, value: Tensor) -> Result<()>;
    fn visit_input(&mut self, name: String) -> Result<()>;
    fn visit_output(&mut self, name: String) -> Result<()>;
    fn visit_gradient_pair(&mut self, param: String, grad: String) -> Result<()>;
    fn visit_node(&mut self, header: NodeHeader, op: OpKind) -> Result<()>;

    fn visit_gemm(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Gemm)
    }
    fn visit_conv(&mut self, h: NodeHeader, attrs: ConvAttrs) -> Result<()> {
        self.visit_node(h, OpKind::Conv(attrs))
    }
    fn visit_relu(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Relu)
    }
    fn visit_max_pool(&mut self, h: NodeHeader, attrs: PoolAttrs) -> Result<()> {
        self.visit_node(h, OpKind::MaxPool(attrs))
    }
    fn visit_median_pool(&mut self, h: NodeHeader, attrs: PoolAttrs) -> Result<()> {
        self.visit_node(h, OpKind::MedianPool(attrs))
    }
    fn visit_softmax(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Softmax)
    }
    fn visit_cross_entropy(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::CrossEntropyLoss)
    }
    fn visit_add(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Add)
    }
    fn visit_sub(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Sub)
    }
    fn visit_mul(&mut self, h: NodeHeader) -> Result<()> {
        self.visit_node(h, OpKind::Mul)
    }
    fn visit_reshape(&mut self, h: NodeHeader, shape: Vec<i64>) -> Result<()> {
        self.visit_node(h, OpKind::Reshape(shape))
    }
    fn visit_split(&mut self, h: NodeHeader, axis: usize, parts: Vec<usize>) -> Result<()> {
        self.visit_node(h, OpKind::Split { axis, parts })
    }
    fn visit_concat(&mut self, h: NodeHeader, axis: usize) -> Result<()> {
        self.visit_node(h, OpKind::Concat { axis })
    }
}

#[derive(Debug, Clone)]
pub struct NodeHeader {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// JSON path of the node, for diagnostics.
    pub path: String,
}

/// Collects visited parts into a [`NetworkGraph`].
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    initializers: BTreeMap<String, Tensor>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    gradient_pairs: BTreeMap<String, String>,
}

impl GraphBuilder {
    pub fn finish(self) -> Result<NetworkGraph> {
        NetworkGraph::from_parts(self.nodes, self.initializers, self.inputs, self.outputs, self.gradient_pairs)
    }
}

impl ModelVisitor for GraphBuilder {
    fn visit_initializer(&mut self, name: String, value: Tensor) -> Result<()> {
        self.initializers.insert(name, value);
        Ok(())
    }
    fn visit_input(&mut self, name: String) -> Result<()> {
        self.inputs.push(name);
        Ok(())
    }
    fn visit_output(&mut self, name: String) -> Result<()> {
        self.outputs.push(name);
        Ok(())
    }
    fn visit_gradient_pair(&mut self, param: String, grad: String) -> Result<()> {
        self.gradient_pairs.insert(param, grad);
        Ok(())
    }
    fn visit_node(&mut self, h: NodeHeader, op: OpKind) -> Result<()> {
        let (lo, hi) = op.input_arity();
        if h.inputs.len() < lo || h.inputs.len() > hi {
            return Err(schema(&format!("{}.inputs", h.path), format!("{} takes {lo}..={hi} inputs", op.name())));
        }
        if h.outputs.len() != op.output_count() {
            return Err(schema(
                &format!("{}.outputs", h.path),
                format!("{} produces {} outputs", op.name(), op.output_count()),
            ));
        }
        self.nodes.push(Node { name: h.name, op, inputs: h.inputs, outputs: h.outputs });
        Ok(())
    }
}

fn schema(path: &str, msg: impl Into<String>) -> Error {
    ModelError::Schema { path: path.to_string(), msg: msg.into() }.into()
}

fn attr_err(path: &str, attr: &str, msg: impl Into<String>) -> Error {
    ModelError::Attribute { path: path.to_string(), attr: attr.to_string(), msg: msg.into() }.into()
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| schema(path, "expected an object"))
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(path, format!("missing field `{key}`")))
}

fn string(v: &Value, path: &str) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| schema(path, "expected a string"))
}

fn strings(v: &Value, path: &str) -> Result<Vec<String>> {
    let arr = v.as_array().ok_or_else(|| schema(path, "expected an array of strings"))?;
    arr.iter().enumerate().map(|(i, s)| string(s, &format!("{path}[{i}]"))).collect()
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(schema(path, format!("unexpected field `{k}`")));
        }
    }
    Ok(())
}

struct Attrs<'a> {
    map: BTreeMap<String, AttrValue>,
    path: &'a str,
}

impl<'a> Attrs<'a> {
    fn parse(v: Option<&Value>, path: &'a str) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(v) = v {
            for (k, val) in object(v, path)? {
                let parsed: AttrValue = serde_json::from_value(val.clone())
                    .map_err(|_| attr_err(path, k, "expected a number or an array of integers"))?;
                map.insert(k.clone(), parsed);
            }
        }
        Ok(Attrs { map, path })
    }

    fn ints(&mut self, name: &str, len: usize, default: Option<Vec<i64>>) -> Result<Vec<i64>> {
        match self.map.remove(name) {
            Some(AttrValue::Ints(v)) if len == 0 || v.len() == len => Ok(v),
            Some(AttrValue::Ints(v)) => Err(attr_err(self.path, name, format!("expected {len} values, got {}", v.len()))),
            Some(_) => Err(attr_err(self.path, name, "expected an integer array")),
            None => default.ok_or_else(|| attr_err(self.path, name, "required")),
        }
    }

    fn int(&mut self, name: &str, default: Option<i64>) -> Result<i64> {
        match self.map.remove(name) {
            Some(AttrValue::Int(v)) => Ok(v),
            Some(_) => Err(attr_err(self.path, name, "expected an integer")),
            None => default.ok_or_else(|| attr_err(self.path, name, "required")),
        }
    }

    fn sizes<const N: usize>(&mut self, name: &str, min: usize, default: Option<[usize; N]>) -> Result<[usize; N]> {
        let v = self.ints(name, N, default.map(|d| d.iter().map(|&x| x as i64).collect()))?;
        let mut out = [0usize; N];
        for (o, x) in out.iter_mut().zip(&v) {
            if *x < min as i64 {
                return Err(attr_err(self.path, name, format!("values must be >= {min}, got {v:?}")));
            }
            *o = *x as usize;
        }
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(attr_err(self.path, k, "not supported by this operator")),
            None => Ok(()),
        }
    }
}

fn pool_attrs(a: &mut Attrs<'_>) -> Result<PoolAttrs> {
    Ok(PoolAttrs {
        kernel: a.sizes("kernel_shape", 1, None)?,
        strides: a.sizes("strides", 1, Some([1, 1]))?,
        pads: a.sizes("pads", 0, Some([0; 4]))?,
    })
}

fn visit_op<V: ModelVisitor>(v: &mut V, op: &str, h: NodeHeader, attrs: Option<&Value>, path: &str) -> Result<()> {
    let attr_path = format!("{path}.attrs");
    let mut a = Attrs::parse(attrs, &attr_path)?;
    match op {
        "Gemm" => {
            a.finish()?;
            v.visit_gemm(h)
        }
        "Conv" => {
            let attrs = ConvAttrs {
                kernel: a.sizes("kernel_shape", 1, None)?,
                strides: a.sizes("strides", 1, Some([1, 1]))?,
                pads: a.sizes("pads", 0, Some([0; 4]))?,
                dilations: a.sizes("dilations", 1, Some([1, 1]))?,
            };
            a.finish()?;
            v.visit_conv(h, attrs)
        }
        "Relu" => {
            a.finish()?;
            v.visit_relu(h)
        }
        "MaxPool" => {
            let p = pool_attrs(&mut a)?;
            a.finish()?;
            v.visit_max_pool(h, p)
        }
        "x-MedianPool" => {
            let p = pool_attrs(&mut a)?;
            a.finish()?;
            v.visit_median_pool(h, p)
        }
        "Softmax" => {
            a.finish()?;
            v.visit_softmax(h)
        }
        "x-CrossEntropyLoss" => {
            a.finish()?;
            v.visit_cross_entropy(h)
        }
        "Add" => {
            a.finish()?;
            v.visit_add(h)
        }
        "Sub" => {
            a.finish()?;
            v.visit_sub(h)
        }
        "Mul" => {
            a.finish()?;
            v.visit_mul(h)
        }
        "Reshape" => {
            let shape = a.ints("shape", 0, None)?;
            if shape.iter().any(|&d| d < -1) || shape.iter().filter(|&&d| d == -1).count() > 1 {
                return Err(attr_err(&attr_path, "shape", format!("invalid target {shape:?}")));
            }
            a.finish()?;
            v.visit_reshape(h, shape)
        }
        "Split" => {
            let axis = a.int("axis", Some(0))?;
            let parts = a.ints("split", 0, None)?;
            if axis < 0 || parts.is_empty() || parts.iter().any(|&p| p < 1) {
                return Err(attr_err(&attr_path, "split", format!("axis {axis}, parts {parts:?}")));
            }
            a.finish()?;
            v.visit_split(h, axis as usize, parts.into_iter().map(|p| p as usize).collect())
        }
        "Concat" => {
            let axis = a.int("axis", None)?;
            if axis < 0 {
                return Err(attr_err(&attr_path, "axis", "must be >= 0"));
            }
            a.finish()?;
            v.visit_concat(h, axis as usize)
        }
        other => Err(ModelError::UnknownOp { path: format!("{path}.op"), op: other.to_string() }.into()),
    }
}

/// Walks a parsed document, calling `visitor` for every declaration.
pub fn walk<V: ModelVisitor>(doc: &Value, visitor: &mut V) -> Result<()> {
    let root = object(doc, "$")?;
    check_keys(root, &["version", "graph"], "$")?;
    let version = field(root, "version", "$")?;
    if version.as_u64() != Some(MODEL_SCHEMA_VERSION as u64) {
        return Err(schema("$.version", format!("unsupported version {version}, expected {MODEL_SCHEMA_VERSION}")));
    }
    let graph = object(field(root, "graph", "$")?, "$.graph")?;
    check_keys(graph, &["nodes", "initializers", "inputs", "outputs", "gradient_pairs"], "$.graph")?;

    if let Some(inits) = graph.get("initializers") {
        let arr = inits.as_array().ok_or_else(|| schema("$.graph.initializers", "expected an array"))?;
        for (i, t) in arr.iter().enumerate() {
            let path = format!("$.graph.initializers[{i}]");
            let obj = object(t, &path)?;
            check_keys(obj, &["name", "dtype", "shape", "data"], &path)?;
            let name = string(field(obj, "name", &path)?, &format!("{path}.name"))?;
            let dtype: DType = string(field(obj, "dtype", &path)?, &format!("{path}.dtype"))?
                .parse()
                .map_err(|e: Error| schema(&format!("{path}.dtype"), e.to_string()))?;
            let shape: Vec<usize> = field(obj, "shape", &path)?
                .as_array()
                .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
                .ok_or_else(|| schema(&format!("{path}.shape"), "expected an array of non-negative integers"))?;
            let b64 = string(field(obj, "data", &path)?, &format!("{path}.data"))?;
            let bytes = B64.decode(b64).map_err(|e| schema(&format!("{path}.data"), format!("bad base64: {e}")))?;
            let t = Tensor::from_le_bytes(dtype, shape, &bytes).map_err(|e| schema(&format!("{path}.data"), e.to_string()))?;
            visitor.visit_initializer(name, t)?;
        }
    }
    for key in ["inputs", "outputs"] {
        if let Some(v) = graph.get(key) {
            for name in strings(v, &format!("$.graph.{key}"))? {
                if key == "inputs" {
                    visitor.visit_input(name)?;
                } else {
                    visitor.visit_output(name)?;
                }
            }
        }
    }
    if let Some(gp) = graph.get("gradient_pairs") {
        for (p, g) in object(gp, "$.graph.gradient_pairs")? {
            visitor.visit_gradient_pair(p.clone(), string(g, &format!("$.graph.gradient_pairs.{p}"))?)?;
        }
    }
    let nodes = field(graph, "nodes", "$.graph")?
        .as_array()
        .ok_or_else(|| schema("$.graph.nodes", "expected an array"))?;
    for (i, n) in nodes.iter().enumerate() {
        let path = format!("$.graph.nodes[{i}]");
        let obj = object(n, &path)?;
        check_keys(obj, &["name", "op", "inputs", "outputs", "attrs"], &path)?;
        let header = NodeHeader {
            name: string(field(obj, "name", &path)?, &format!("{path}.name"))?,
            inputs: strings(field(obj, "inputs", &path)?, &format!("{path}.inputs"))?,
            outputs: strings(field(obj, "outputs", &path)?, &format!("{path}.outputs"))?,
            path: path.clone(),
        };
        let op = string(field(obj, "op", &path)?, &format!("{path}.op"))?;
        visit_op(visitor, &op, header, obj.get("attrs"), &path)?;
    }
    Ok(())
}

pub fn load_model(bytes: &[u8]) -> Result<NetworkGraph> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| ModelError::Json {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let mut builder = GraphBuilder::default();
    walk(&doc, &mut builder)?;
    builder.finish()
}

pub fn load_model_file(path: &std::path::Path) -> Result<NetworkGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    load_model(&bytes)
}

fn attrs_json(op: &OpKind) -> Value {
    let m: Map<String, Value> = op
        .attributes()
        .into_iter()
        .map(|(k, v)| (k, serde_json::to_value(v).expect("attribute values serialize")))
        .collect();
    Value::Object(m)
}

/// Canonical document for `g`.
pub fn model_document(g: &NetworkGraph) -> Value {
    let nodes: Vec<Value> = g
        .nodes()
        .iter()
        .map(|n| {
            json!({
                "name": n.name,
                "op": n.op.name(),
                "inputs": n.inputs,
                "outputs": n.outputs,
                "attrs": attrs_json(&n.op),
            })
        })
        .collect();
    let inits: Vec<Value> = g
        .initializers()
        .iter()
        .map(|(name, t)| {
            json!({
                "name": name,
                "dtype": t.dtype().name(),
                "shape": t.shape(),
                "data": B64.encode(t.to_le_bytes()),
            })
        })
        .collect();
    json!({
        "version": MODEL_SCHEMA_VERSION,
        "graph": {
            "nodes": nodes,
            "initializers": inits,
            "inputs": g.inputs(),
            "outputs": g.outputs(),
            "gradient_pairs": g.gradient_pairs(),
        }
    })
}

pub fn save_model(g: &NetworkGraph) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&model_document(g)).expect("model documents serialize");
    out.push(b'\n');
    out
}
