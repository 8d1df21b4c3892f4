use std::collections::BTreeMap;
use std::fs;

use bench500::graph::microbatch::{conv_batches, fits};
use bench500::graph::{
    check_graph_gradients, inference, load_model, microbatch_transform, save_model, CostModel, Events, NetworkGraph,
};
use bench500::models::{self, fixture, fixture_source, fixtures_dir, FIXTURES};
use bench500::operators::OpKind;
use bench500::{DType, Rng, Tensor};
use proptest::prelude::*;
use serde_json::{json, Value};

const GOLDEN: &str = "lenet-golden.json";

fn random(rng: &mut Rng, dtype: DType, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::from_f64_values(dtype, shape.to_vec(), &v)
}

fn labels(dtype: DType, l: &[usize]) -> Tensor {
    let v: Vec<f64> = l.iter().map(|&c| c as f64).collect();
    Tensor::from_f64_values(dtype, [l.len()], &v)
}

fn feeds(x: Tensor, y: Tensor) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("x".to_string(), x), ("labels".to_string(), y)])
}

/// Input of the frozen LeNet reference run.
fn lenet_feeds(dtype: DType) -> BTreeMap<String, Tensor> {
    let mut rng = Rng::new(7, 0);
    feeds(random(&mut rng, dtype, &[2, 28, 28]), labels(dtype, &[3, 7]))
}

fn conv_feeds(dtype: DType, batch: usize, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = Rng::new(seed, 0);
    let l: Vec<usize> = (0..batch).map(|i| i % 4).collect();
    feeds(random(&mut rng, dtype, &[batch, 3, 8, 8]), labels(dtype, &l))
}

fn run(g: &NetworkGraph, feeds: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    inference(g, feeds, &["loss", "probs"], &mut Events::new()).unwrap().outputs
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.to_f64_vec().iter().zip(b.to_f64_vec()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn golden_document() -> Value {
    let g = fixture("lenet").unwrap().cast(DType::F64);
    let out = run(&g, &lenet_feeds(DType::F64));
    json!({
        "input": {"seed": 7, "shape": [2, 28, 28], "labels": [3, 7]},
        "loss": out["loss"].to_f64_vec(),
        "probs": out["probs"].to_f64_vec(),
    })
}

/// Rewrites the bundled model files and the LeNet golden outputs.
#[test]
#[ignore = "regenerates data/fixtures; run with --ignored"]
fn regenerate_fixtures() {
    let dir = fixtures_dir();
    fs::create_dir_all(&dir).unwrap();
    for name in FIXTURES {
        let g = fixture_source(name).unwrap();
        fs::write(dir.join(format!("{name}.json")), save_model(&g)).unwrap();
    }
    let doc = serde_json::to_string_pretty(&golden_document()).unwrap();
    fs::write(dir.join(GOLDEN), doc + "\n").unwrap();
}

#[test]
fn fixtures_match_their_generators() {
    for name in FIXTURES {
        let loaded = fixture(name).unwrap();
        let source = fixture_source(name).unwrap();
        assert_eq!(save_model(&loaded), save_model(&source), "{name}");
        assert_eq!(loaded.initializers(), source.initializers(), "{name}");
    }
}

#[test]
fn save_after_load_reproduces_file_bytes() {
    for name in FIXTURES {
        let bytes = fs::read(fixtures_dir().join(format!("{name}.json"))).unwrap();
        let g = load_model(&bytes).unwrap();
        assert_eq!(save_model(&g), bytes, "{name}");
        assert_eq!(save_model(&load_model(&save_model(&g)).unwrap()), bytes);
    }
}

#[test]
fn lenet_fixture_matches_golden_outputs() {
    let text = fs::read_to_string(fixtures_dir().join(GOLDEN)).unwrap();
    let frozen: Value = serde_json::from_str(&text).unwrap();
    let values = |key: &str| -> Vec<f64> {
        frozen[key].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
    };
    let g = fixture("lenet").unwrap().cast(DType::F64);
    let out = run(&g, &lenet_feeds(DType::F64));
    let (loss, probs) = (values("loss"), values("probs"));
    assert_eq!(probs.len(), 20);
    for (a, b) in out["loss"].to_f64_vec().iter().zip(&loss) {
        assert!((a - b).abs() <= 1e-12, "loss {a} vs {b}");
    }
    for (a, b) in out["probs"].to_f64_vec().iter().zip(&probs) {
        assert!((a - b).abs() <= 1e-12, "prob {a} vs {b}");
    }
    // Each row of probabilities sums to one.
    for row in probs.chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // The stored f32 model agrees with the f64 reference to f32 precision.
    let out32 = run(&fixture("lenet").unwrap(), &lenet_feeds(DType::F32));
    for (a, b) in out32["probs"].to_f64_vec().iter().zip(&probs) {
        assert!((a - b).abs() <= 1e-5, "f32 prob {a} vs {b}");
    }
}

#[test]
fn fixture_gradients_match_finite_differences() {
    let cases: [(&str, BTreeMap<String, Tensor>); 3] = [
        ("lenet", lenet_feeds(DType::F64)),
        ("conv", conv_feeds(DType::F64, 4, 3)),
        ("mlp", feeds(random(&mut Rng::new(5, 0), DType::F64, &[3, 28, 28]), labels(DType::F64, &[0, 4, 9]))),
    ];
    for (name, f) in cases {
        let g = fixture(name).unwrap();
        let report = check_graph_gradients(&g, &f, "loss", &mut Rng::new(11, 0), 12, 1e-6).unwrap();
        assert!(report.probes > 0);
        assert_eq!(report.per_param.len(), g.gradient_pairs().len());
        let worst = report.max_rel_error();
        assert!(worst <= 1e-5, "{name}: {worst:e} {:?}", report.per_param);
    }
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let g = models::mlp(&[5], &[7], 3, DType::F64, 2).unwrap();
    let f = feeds(random(&mut Rng::new(1, 0), DType::F64, &[6, 5]), labels(DType::F64, &[0, 1, 2, 2, 1, 0]));
    // Every coordinate of every parameter.
    let report = check_graph_gradients(&g, &f, "loss", &mut Rng::new(0, 0), usize::MAX, 1e-6).unwrap();
    assert_eq!(report.probes, 5 * 7 + 7 + 7 * 3 + 3);
    assert!(report.max_rel_error() <= 1e-5, "{:?}", report.per_param);
}

#[test]
fn inference_is_deterministic() {
    for name in FIXTURES {
        let g = fixture(name).unwrap();
        let f = match *name {
            "conv" => conv_feeds(DType::F64, 4, 9),
            _ => lenet_feeds(DType::F32),
        };
        let a = run(&g, &f);
        let b = run(&g.clone(), &f);
        for k in ["loss", "probs"] {
            assert_eq!(a[k].to_le_bytes(), b[k].to_le_bytes(), "{name}/{k}");
        }
    }
}

/// Workspace model for the conv fixture: one unit of memory per image.
fn unit_cost() -> CostModel {
    CostModel::linear(1000.0, 0.0)
}

fn count_convs(g: &NetworkGraph) -> usize {
    g.nodes().iter().filter(|n| matches!(n.op, OpKind::Conv(_))).count()
}

#[test]
fn batch_four_splits_into_two_halves() {
    let g = fixture("conv").unwrap();
    let t = microbatch_transform(&g, 2000, &unit_cost(), 4).unwrap();
    assert!(!fits(&g, 2000, &unit_cost(), 4));
    assert!(fits(&t, 2000, &unit_cost(), 4));
    assert_eq!(count_convs(&t), 4);
    for (_, b) in conv_batches(&t, 4) {
        assert_eq!(b, 2);
    }
    let splits: Vec<_> = t.nodes().iter().filter(|n| matches!(n.op, OpKind::Split { .. })).collect();
    assert_eq!(splits.len(), 2);
    assert!(splits.iter().all(|n| matches!(&n.op, OpKind::Split { axis: 0, parts } if parts == &[2, 2])));

    let f64_feeds = conv_feeds(DType::F64, 4, 1);
    let (a, b) = (run(&g, &f64_feeds), run(&t, &f64_feeds));
    assert_eq!(linf(&a["probs"], &b["probs"]), 0.0);
    assert_eq!(linf(&a["loss"], &b["loss"]), 0.0);

    let (g32, t32) = (g.cast(DType::F32), t.cast(DType::F32));
    let f32_feeds = conv_feeds(DType::F32, 4, 1);
    let (a, b) = (run(&g32, &f32_feeds), run(&t32, &f32_feeds));
    assert!(linf(&a["probs"], &b["probs"]) <= 1e-6);
}

#[test]
fn generous_cap_leaves_graph_unchanged() {
    let g = fixture("conv").unwrap();
    let t = microbatch_transform(&g, 4000, &unit_cost(), 4).unwrap();
    assert_eq!(save_model(&t), save_model(&g));
}

#[test]
fn cap_below_single_image_is_infeasible() {
    let g = fixture("conv").unwrap();
    let err = microbatch_transform(&g, 999, &unit_cost(), 4).unwrap_err();
    assert!(err.to_string().contains("conv1"), "{err}");
    let mlp = fixture("mlp").unwrap();
    assert!(microbatch_transform(&mlp, 1 << 30, &unit_cost(), 4).is_err());
}

#[test]
fn batch_468_overflows_untransformed_but_fits_after_split() {
    // Per-image workspace of the fixture's first convolution in f32 and a
    // cap that holds 467 images.
    let g = fixture("conv").unwrap().cast(DType::F32);
    let OpKind::Conv(attrs) = g.node("conv1").unwrap().op else { panic!("conv1 is a convolution") };
    let cost = CostModel::im2col(3, 8, 8, 8, &attrs, 4).unwrap();
    let cap = cost.workspace(467);
    assert!(fits(&g, cap, &cost, 467));
    assert!(!fits(&g, cap, &cost, 468));
    let t = microbatch_transform(&g, cap, &cost, 468).unwrap();
    assert!(fits(&t, cap, &cost, 468));
    // 468 = 2·2·3·3·13; the largest divisor within the cap is 234.
    assert!(conv_batches(&t, 468).iter().all(|(_, b)| *b == 234));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transform_preserves_outputs(batch in 1usize..9, images in 1usize..9, seed in 0u64..1000) {
        let cap = 1000 * images.min(batch) as u64;
        let g = fixture("conv").unwrap();
        let t = microbatch_transform(&g, cap, &unit_cost(), batch).unwrap();
        prop_assert!(fits(&t, cap, &unit_cost(), batch));
        let f = conv_feeds(DType::F64, batch, seed);
        let (a, b) = (run(&g, &f), run(&t, &f));
        prop_assert_eq!(linf(&a["probs"], &b["probs"]), 0.0);
        prop_assert_eq!(a["loss"].to_le_bytes(), b["loss"].to_le_bytes());

        let (g32, t32) = (g.cast(DType::F32), t.cast(DType::F32));
        let f = conv_feeds(DType::F32, batch, seed);
        let (a, b) = (run(&g32, &f), run(&t32, &f));
        prop_assert!(linf(&a["probs"], &b["probs"]) <= 1e-6);
    }
}
