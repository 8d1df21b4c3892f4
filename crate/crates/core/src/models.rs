//! Built-in model graphs with seeded initialization.
//!
//! Weights use Kaiming-uniform fan-in initialization, `U(−b, b)` with
//! `b = sqrt(6 / fan_in)`, and biases start at zero. All draws come from a
//! single `Rng::new(seed, 0)` stream in construction order.

use std::path::{Path, PathBuf};

use crate::graph::{NetworkGraph, Node};
use crate::operators::{ConvAttrs, OpKind, PoolAttrs};
use crate::tensor::{Init, TensorDesc};
use crate::{DType, Error, Result, Rng, Tensor};

/// Model files shipped with the repository (see [`fixture`]).
pub const FIXTURES: &[&str] = &["lenet", "conv", "mlp"];

/// Directory of the bundled model files.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fixtures")
}

/// Loads bundled fixture `name` (`<name>.json` in [`fixtures_dir`]).
pub fn fixture(name: &str) -> Result<NetworkGraph> {
    crate::graph::model::load_model_file(&fixtures_dir().join(format!("{name}.json")))
}

/// The graph a bundled fixture was generated from: LeNet in f32, the conv
/// classifier in f64, and a 784-32-10 MLP in f32, all with seed 1.
pub fn fixture_source(name: &str) -> Result<NetworkGraph> {
    match name {
        "lenet" => lenet(DType::F32, 1),
        "conv" => conv_fixture(DType::F64, 1),
        "mlp" => mlp(&[28, 28], &[32], 10, DType::F32, 1),
        other => Err(Error::InvalidArgument(format!("unknown fixture `{other}`"))),
    }
}

/// Names accepted by [`builtin`].
pub const BUILTINS: &[&str] = &["mlp", "mlp-small", "lenet", "conv", "lsq"];

pub fn kaiming_uniform(rng: &mut Rng, dtype: DType, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::alloc(&TensorDesc::new(dtype, shape.to_vec())?, Init::Uniform(rng, -bound, bound))
}

struct Builder {
    g: NetworkGraph,
    rng: Rng,
    dtype: DType,
}

impl Builder {
    fn new(dtype: DType, seed: u64) -> Self {
        Builder { g: NetworkGraph::new(), rng: Rng::new(seed, 0), dtype }
    }

    fn dense(&mut self, name: &str, x: &str, fan_in: usize, fan_out: usize) -> Result<String> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let wt = kaiming_uniform(&mut self.rng, self.dtype, &[fan_in, fan_out], fan_in)?;
        self.g.add_initializer(&w, wt)?;
        self.g.add_initializer(&b, Tensor::zeros(self.dtype, [fan_out]))?;
        let y = format!("{name}.out");
        self.g.add_node(Node::new(name, OpKind::Gemm, [x, w.as_str(), b.as_str()], [y.as_str()]))?;
        Ok(y)
    }

    fn conv(&mut self, name: &str, x: &str, c: usize, f: usize, attrs: ConvAttrs) -> Result<String> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let [kh, kw] = attrs.kernel;
        let wt = kaiming_uniform(&mut self.rng, self.dtype, &[f, c, kh, kw], c * kh * kw)?;
        self.g.add_initializer(&w, wt)?;
        self.g.add_initializer(&b, Tensor::zeros(self.dtype, [f]))?;
        let y = format!("{name}.out");
        self.g.add_node(Node::new(name, OpKind::Conv(attrs), [x, w.as_str(), b.as_str()], [y.as_str()]))?;
        Ok(y)
    }

    fn unary(&mut self, name: &str, op: OpKind, x: &str) -> Result<String> {
        let y = format!("{name}.out");
        self.g.add_node(Node::new(name, op, [x], [y.as_str()]))?;
        Ok(y)
    }

    /// Cross-entropy head; declares `loss` and `probs` as outputs.
    fn finish_classifier(mut self, logits: &str) -> Result<NetworkGraph> {
        self.g.add_input("labels")?;
        self.g.add_node(Node::new("xent", OpKind::CrossEntropyLoss, [logits, "labels"], ["loss", "probs"]))?;
        self.g.set_outputs(vec!["loss".into(), "probs".into()])?;
        self.g.validate()?;
        Ok(self.g)
    }
}

/// Fully connected ReLU network over items of `item_shape` (flattened
/// first when it has more than one axis).
pub fn mlp(item_shape: &[usize], hidden: &[usize], classes: usize, dtype: DType, seed: u64) -> Result<NetworkGraph> {
    if item_shape.is_empty() || classes == 0 || hidden.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad mlp layout {item_shape:?} {hidden:?} {classes}")));
    }
    let mut b = Builder::new(dtype, seed);
    b.g.add_input("x")?;
    let mut x = "x".to_string();
    if item_shape.len() > 1 {
        x = b.unary("flatten", OpKind::Reshape(vec![0, -1]), &x)?;
    }
    let mut width: usize = item_shape.iter().product();
    for (i, &h) in hidden.iter().enumerate() {
        let fc = b.dense(&format!("fc{}", i + 1), &x, width, h)?;
        x = b.unary(&format!("relu{}", i + 1), OpKind::Relu, &fc)?;
        width = h;
    }
    let logits = b.dense(&format!("fc{}", hidden.len() + 1), &x, width, classes)?;
    b.finish_classifier(&logits)
}

/// LeNet-5 style network for `[28, 28]` single-channel images.
pub fn lenet(dtype: DType, seed: u64) -> Result<NetworkGraph> {
    let mut b = Builder::new(dtype, seed);
    b.g.add_input("x")?;
    let x = b.unary("image", OpKind::Reshape(vec![-1, 1, 28, 28]), "x")?;
    let c1 = b.conv("conv1", &x, 1, 6, ConvAttrs::new([5, 5]).with_pads([2, 2, 2, 2]))?;
    let r1 = b.unary("relu1", OpKind::Relu, &c1)?;
    let p1 = b.unary("pool1", OpKind::MaxPool(PoolAttrs::new([2, 2], [2, 2])), &r1)?;
    let c2 = b.conv("conv2", &p1, 6, 16, ConvAttrs::new([5, 5]))?;
    let r2 = b.unary("relu2", OpKind::Relu, &c2)?;
    let p2 = b.unary("pool2", OpKind::MaxPool(PoolAttrs::new([2, 2], [2, 2])), &r2)?;
    let flat = b.unary("flatten", OpKind::Reshape(vec![0, -1]), &p2)?;
    let f1 = b.dense("fc1", &flat, 16 * 5 * 5, 120)?;
    let a1 = b.unary("relu3", OpKind::Relu, &f1)?;
    let f2 = b.dense("fc2", &a1, 120, 84)?;
    let a2 = b.unary("relu4", OpKind::Relu, &f2)?;
    let logits = b.dense("fc3", &a2, 84, 10)?;
    b.finish_classifier(&logits)
}

/// Small two-convolution classifier over `[3, 8, 8]` items with 4 classes.
pub fn conv_fixture(dtype: DType, seed: u64) -> Result<NetworkGraph> {
    let mut b = Builder::new(dtype, seed);
    b.g.add_input("x")?;
    let c1 = b.conv("conv1", "x", 3, 8, ConvAttrs::new([3, 3]).with_pads([1, 1, 1, 1]))?;
    let r1 = b.unary("relu1", OpKind::Relu, &c1)?;
    let p1 = b.unary("pool1", OpKind::MedianPool(PoolAttrs::new([2, 2], [2, 2])), &r1)?;
    let c2 = b.conv("conv2", &p1, 8, 4, ConvAttrs::new([3, 3]).with_strides([2, 2]))?;
    let r2 = b.unary("relu2", OpKind::Relu, &c2)?;
    let flat = b.unary("flatten", OpKind::Reshape(vec![0, -1]), &r2)?;
    let logits = b.dense("fc", &flat, 4, 4)?;
    b.finish_classifier(&logits)
}

/// Mean squared error of `y ≈ w·x` over a fixed batch.
///
/// The input `x` is `[batch, 2]` holding `(x, y)` pairs; the loss is
/// `Σ (w·x_i − y_i)² / batch` as a `[1, 1]` tensor. The averaging vector is
/// a constant without a gradient pair.
pub fn lsq(batch: usize, dtype: DType, seed: u64) -> Result<NetworkGraph> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = Rng::new(seed, 0);
    let mut g = NetworkGraph::new();
    g.add_input("x")?;
    g.add_initializer("w", Tensor::alloc(&TensorDesc::new(dtype, [1, 1])?, Init::Uniform(&mut rng, -1.0, 1.0))?)?;
    g.add_constant("mean", Tensor::full(dtype, [batch, 1], 1.0 / batch as f64))?;
    g.add_node(Node::new("split", OpKind::Split { axis: 1, parts: vec![1, 1] }, ["x"], ["xin", "target"]))?;
    g.add_node(Node::new("pred", OpKind::Gemm, ["xin", "w"], ["yhat"]))?;
    g.add_node(Node::new("residual", OpKind::Sub, ["yhat", "target"], ["r"]))?;
    g.add_node(Node::new("square", OpKind::Mul, ["r", "r"], ["r2"]))?;
    g.add_node(Node::new("row", OpKind::Reshape(vec![1, -1]), ["r2"], ["r2row"]))?;
    g.add_node(Node::new("average", OpKind::Gemm, ["r2row", "mean"], ["loss"]))?;
    g.set_outputs(vec!["loss".into()])?;
    Ok(g)
}

/// Builds a model by name (see [`BUILTINS`]). MNIST-shaped models take
/// `[28, 28]` items; `lsq` uses a batch of 32.
pub fn builtin(name: &str, dtype: DType, seed: u64) -> Result<NetworkGraph> {
    match name {
        "mlp" => mlp(&[28, 28], &[256], 10, dtype, seed),
        "mlp-small" => mlp(&[28, 28], &[32], 10, dtype, seed),
        "lenet" => lenet(dtype, seed),
        "conv" => conv_fixture(dtype, seed),
        "lsq" => lsq(32, dtype, seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown built-in model `{other}` (available: {})",
            BUILTINS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::graph::{inference, Events};

    fn run(g: &NetworkGraph, x: Tensor, labels: Tensor) -> BTreeMap<String, Tensor> {
        let feeds = BTreeMap::from([("x".to_string(), x), ("labels".to_string(), labels)]);
        inference(g, &feeds, &[], &mut Events::new()).unwrap().outputs
    }

    #[test]
    fn shapes_infer() {
        for (name, item) in [("mlp", vec![28, 28]), ("lenet", vec![28, 28]), ("conv", vec![3, 8, 8])] {
            let g = builtin(name, DType::F32, 1).unwrap();
            let mut shape = vec![5];
            shape.extend(&item);
            let inputs = BTreeMap::from([
                ("x".to_string(), TensorDesc::new(DType::F32, shape).unwrap()),
                ("labels".to_string(), TensorDesc::new(DType::F32, [5]).unwrap()),
            ]);
            let descs = g.infer_shapes(&inputs).unwrap();
            assert_eq!(descs["probs"].shape.last(), Some(&if name == "conv" { 4 } else { 10 }));
        }
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut g = lenet(DType::F64, 3).unwrap();
        let names: Vec<String> = g.initializers().keys().cloned().collect();
        for n in names {
            let t = g.initializer_mut(&n).unwrap();
            *t = Tensor::zeros(DType::F64, t.shape().to_vec());
        }
        let out = run(&g, Tensor::zeros(DType::F64, [2, 28, 28]), Tensor::zeros(DType::F64, [2]));
        assert!(out["probs"].to_f64_vec().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = mlp(&[4], &[3], 2, DType::F64, 9).unwrap();
        let b = mlp(&[4], &[3], 2, DType::F64, 9).unwrap();
        assert_eq!(a, b);
        let w = a.initializer("fc1.w").unwrap().to_f64_vec();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(a.initializer("fc1.b").unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
        assert_ne!(a, mlp(&[4], &[3], 2, DType::F64, 10).unwrap());
    }

    #[test]
    fn lsq_loss_matches_formula() {
        let mut g = lsq(4, DType::F64, 0).unwrap();
        *g.initializer_mut("w").unwrap() = Tensor::from_vec([1, 1], vec![1.5f64]).unwrap();
        let x = Tensor::from_vec([4, 2], vec![1.0f64, 2.0, 2.0, 4.0, -1.0, -2.0, 0.5, 1.0]).unwrap();
        let feeds = BTreeMap::from([("x".to_string(), x)]);
        let out = inference(&g, &feeds, &[], &mut Events::new()).unwrap().outputs;
        let expect: f64 = [(1.0, 2.0), (2.0, 4.0), (-1.0, -2.0), (0.5, 1.0)]
            .iter()
            .map(|(x, y): &(f64, f64)| (1.5 * x - y).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!((out["loss"].get_f64(0) - expect).abs() < 1e-15);
        assert!(!g.gradient_pairs().contains_key("mean"));
    }
}
