use std::collections::BTreeMap;

use bench500::data_io::{synthetic_dataset, Dataset, SyntheticKind};
use bench500::graph::{inference, Events, NetworkGraph, Node};
use bench500::metrics::{test_optimizer, test_training, Outcome, Sequential};
use bench500::models;
use bench500::operators::OpKind;
use bench500::training::{
    apply_update_rule, argmax_rows, evaluate_accuracy, train, OptimizerKind, OptimizerState, SamplerChoice,
    Trainer, TrainingConfig, UpdateRule,
};
use bench500::{DType, Error, Rng, Tensor};
use proptest::prelude::*;

/// `(x, 2x)` pairs with x uniform in [-1, 1].
fn lsq_data(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed, 0);
    let mut v = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x = rng.uniform_range(-1.0, 1.0);
        v.extend([x as f32, (2.0 * x) as f32]);
    }
    Dataset::new("lsq", Tensor::from_vec([n, 2], v).unwrap(), Tensor::zeros(DType::F32, [n]), 1).unwrap()
}

fn lsq_config(lr: f64, steps: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 32,
        epochs: steps,
        lr,
        dtype: DType::F64,
        sampler: SamplerChoice::Sequential,
        ..Default::default()
    }
}

#[test]
fn least_squares_reaches_optimum() {
    let ds = lsq_data(32, 1);
    let g = models::lsq(32, DType::F64, 0).unwrap();
    let (g, stream) = train(g, &ds, None, &lsq_config(0.5, 200), &mut Events::new()).unwrap();
    let w = g.initializer("w").unwrap().get_f64(0);
    assert!((w - 2.0).abs() <= 1e-3, "w = {w}");
    assert_eq!(stream.values("loss").len(), 200);
}

#[test]
fn least_squares_final_loss_through_test_training() {
    let ds = lsq_data(32, 2);
    let g = models::lsq(32, DType::F64, 0).unwrap();
    let rep = test_training(&Sequential, g, &ds, None, &lsq_config(0.5, 300)).unwrap();
    assert_eq!(rep.outcome, Outcome::Completed);
    assert!(rep.final_loss.unwrap() <= 1e-5);
}

#[test]
fn divergence_is_an_outcome() {
    let ds = lsq_data(32, 3);
    let g = models::lsq(32, DType::F64, 0).unwrap();
    let rep = test_training(&Sequential, g.clone(), &ds, None, &lsq_config(1e3, 500)).unwrap();
    assert!(matches!(rep.outcome, Outcome::Diverged { .. }));
    let err = train(g, &ds, None, &lsq_config(1e3, 500), &mut Events::new()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let ds = lsq_data(32, 1);
    let g = models::lsq(32, DType::F64, 0).unwrap();
    let (g2, stream) = train(g.clone(), &ds, None, &lsq_config(0.5, 0), &mut Events::new()).unwrap();
    assert_eq!(g, g2);
    assert!(stream.is_empty());
}

fn blobs(n: usize, seed: u64) -> Dataset {
    synthetic_dataset(n, &[6], 3, SyntheticKind::GaussianBlobs { sigma: 0.5 }, seed).unwrap()
}

fn small_mlp(dtype: DType) -> NetworkGraph {
    models::mlp(&[6], &[8], 3, dtype, 4).unwrap()
}

fn cfg(opt: OptimizerKind, dtype: DType) -> TrainingConfig {
    TrainingConfig {
        batch_size: 10,
        epochs: 3,
        seed: 7,
        lr: 0.05,
        optimizer: opt,
        dtype,
        train_accuracy_every: 5,
        ..Default::default()
    }
}

#[test]
fn three_step_and_direct_paths_agree_bitwise() {
    let ds = blobs(60, 1);
    for rule in [
        UpdateRule::Sgd,
        UpdateRule::Momentum { mu: 0.9 },
        UpdateRule::Adagrad { eps: 1e-8 },
        UpdateRule::adam(),
    ] {
        for dtype in [DType::F32, DType::F64] {
            let a = cfg(OptimizerKind::Rule(rule), dtype);
            let b = TrainingConfig { direct_update: true, ..a.clone() };
            let curves = test_optimizer(&a, &b, &small_mlp(DType::F64), &ds, 40).unwrap();
            assert!(curves.is_zero(), "{rule:?} {dtype}");
            assert_eq!(curves.curves[0].len(), 40);
        }
    }
}

#[test]
fn same_config_twice_has_zero_divergence() {
    let ds = blobs(60, 2);
    let c = cfg("accelegrad".parse().unwrap(), DType::F64);
    let curves = test_optimizer(&c, &c, &small_mlp(DType::F64), &ds, 20).unwrap();
    assert!(curves.is_zero());
    let other = TrainingConfig { batch_size: 5, ..c.clone() };
    assert!(test_optimizer(&c, &other, &small_mlp(DType::F64), &ds, 5).is_err());
}

#[test]
fn runs_are_reproducible_and_metrics_do_not_perturb() {
    let ds = blobs(90, 3);
    let test = blobs(30, 4);
    let c = cfg(OptimizerKind::Rule(UpdateRule::adam()), DType::F32);
    let (g1, s1) = train(small_mlp(DType::F32), &ds, Some(&test), &c, &mut Events::new()).unwrap();
    let (g2, s2) = train(small_mlp(DType::F32), &ds, Some(&test), &c, &mut Events::new()).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(s1.to_jsonl(false), s2.to_jsonl(false));
    assert_eq!(s1.values("test_accuracy").len(), 3);
    assert!(!s1.values("train_accuracy").is_empty());

    let quiet = TrainingConfig { instrument: false, ..c };
    let (g3, s3) = train(small_mlp(DType::F32), &ds, Some(&test), &quiet, &mut Events::new()).unwrap();
    assert_eq!(g1, g3);
    assert!(s3.is_empty());
}

#[test]
fn steps_per_epoch_drop_the_partial_batch() {
    let ds = blobs(95, 5);
    let c = cfg(OptimizerKind::Rule(UpdateRule::Sgd), DType::F32);
    let t = Trainer::new(small_mlp(DType::F32), &ds, None, c).unwrap();
    assert_eq!(t.total_steps(), 9 * 3);
}

#[test]
fn early_stop_ends_training() {
    let ds = blobs(60, 6);
    let c = cfg(OptimizerKind::Rule(UpdateRule::Sgd), DType::F32);
    let mut ev = Events::new();
    ev.on(|kind, step, _| {
        if kind == bench500::graph::EventKind::EarlyStopQuery && step == 4 {
            bench500::graph::Control::Stop
        } else {
            bench500::graph::Control::Continue
        }
    });
    let (_, stream) = train(small_mlp(DType::F32), &ds, None, &c, &mut ev).unwrap();
    assert_eq!(stream.values("loss").len(), 5);
}

#[test]
fn blobs_are_learnable() {
    let ds = blobs(300, 8);
    let test = blobs(90, 9);
    let c = TrainingConfig { epochs: 5, ..cfg(OptimizerKind::Rule(UpdateRule::adam()), DType::F32) };
    let (g, _) = train(small_mlp(DType::F32), &ds, None, &c, &mut Events::new()).unwrap();
    assert!(evaluate_accuracy(&g, &test, 32).unwrap() > 0.9);
}

#[test]
fn accuracy_matches_loop_oracle() {
    let ds = blobs(100, 10);
    let g = small_mlp(DType::F32);
    let acc = evaluate_accuracy(&g, &ds, 17).unwrap();
    let mut correct = 0;
    for i in 0..ds.len() {
        let (x, _) = ds.batch(&[i], DType::F32).unwrap();
        let feeds = BTreeMap::from([("x".to_string(), x)]);
        let out = inference(&g, &feeds, &["fc2.out"], &mut Events::new()).unwrap();
        let row = out.outputs["fc2.out"].to_f64_vec();
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        correct += (best == ds.label(i)) as usize;
    }
    assert_eq!(acc, correct as f64 / 100.0);
    assert_eq!(argmax_rows(&Tensor::from_vec([1, 3], vec![0.0f32, 0.0, 0.0]).unwrap()).unwrap(), vec![0]);
}

#[test]
fn labels_as_logits_score_perfectly() {
    let n = 50;
    let mut onehot = vec![0.0f32; n * 5];
    let labels: Vec<f32> = (0..n).map(|i| ((i * 7) % 5) as f32).collect();
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * 5 + l as usize] = 1.0;
    }
    let ds = Dataset::new("oracle", Tensor::from_vec([n, 5], onehot).unwrap(), Tensor::from_vec([n], labels).unwrap(), 5)
        .unwrap();
    let mut g = NetworkGraph::new();
    g.add_input("x").unwrap();
    g.add_node(Node::new("id", OpKind::Relu, ["x"], ["scores"])).unwrap();
    g.add_output("scores").unwrap();
    assert_eq!(evaluate_accuracy(&g, &ds, 8).unwrap(), 1.0);
}

/// Adam written out from its defining formulas, in f64.
fn adam_oracle(w0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    w
}

fn momentum_oracle(w0: &[f64], grads: &[Vec<f64>], lr: f64, mu: f64) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut v = vec![0.0; w.len()];
    for g in grads {
        for i in 0..w.len() {
            v[i] = mu * v[i] + g[i];
            w[i] -= lr * v[i];
        }
    }
    w
}

fn adagrad_oracle(w0: &[f64], grads: &[Vec<f64>], lr: f64, eps: f64) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut a = vec![0.0; w.len()];
    for g in grads {
        for i in 0..w.len() {
            a[i] += g[i] * g[i];
            w[i] -= lr * g[i] / (a[i].sqrt() + eps);
        }
    }
    w
}

fn run_rule(rule: UpdateRule, w0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let mut st = OptimizerState::default();
    let mut w = Tensor::from_vec([w0.len()], w0.to_vec()).unwrap();
    for g in grads {
        st.t += 1;
        let g = Tensor::from_vec([w0.len()], g.clone()).unwrap();
        w = apply_update_rule(&rule, lr, &mut st, "w", &w, &g, true).unwrap();
    }
    w.to_f64_vec()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn update_rules_match_formula_oracles_over_50_steps() {
    let mut rng = Rng::new(21, 0);
    let w0: Vec<f64> = (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..50).map(|_| (0..16).map(|_| rng.normal(0.0, 1.0)).collect()).collect();
    assert!(linf(&run_rule(UpdateRule::adam(), &w0, &grads, 1e-2), &adam_oracle(&w0, &grads, 1e-2)) <= 1e-10);
    assert!(
        linf(&run_rule(UpdateRule::Momentum { mu: 0.9 }, &w0, &grads, 1e-2), &momentum_oracle(&w0, &grads, 1e-2, 0.9))
            <= 1e-10
    );
    assert!(
        linf(&run_rule(UpdateRule::Adagrad { eps: 1e-8 }, &w0, &grads, 1e-1), &adagrad_oracle(&w0, &grads, 1e-1, 1e-8))
            <= 1e-10
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adagrad_accumulator_never_shrinks(grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..20)) {
        let mut st = OptimizerState::default();
        let rule = UpdateRule::Adagrad { eps: 1e-8 };
        let mut w = Tensor::zeros(DType::F64, [4]);
        let mut prev = vec![0.0; 4];
        for g in grads {
            st.t += 1;
            w = apply_update_rule(&rule, 0.1, &mut st, "w", &w, &Tensor::from_vec([4], g).unwrap(), true).unwrap();
            let acc = st.buffers["w"][0].to_f64_vec();
            prop_assert!(acc.iter().zip(&prev).all(|(a, p)| a >= p));
            prev = acc;
        }
    }

    #[test]
    fn shuffle_epoch_preserves_class_counts(seed in any::<u64>(), batch in 1usize..20) {
        let ds = blobs(60, 3);
        let mut s = bench500::training::Sampler::shuffle(seed, batch).unwrap();
        let hist = bench500::training::dataset_bias(&mut s, Some(&ds), 1).unwrap();
        let covered = (60 / batch) * batch;
        prop_assert_eq!(hist.iter().sum::<usize>(), covered);
        if covered == 60 {
            prop_assert_eq!(hist, ds.class_counts());
        }
    }
}

#[test]
fn synthetic_latency_is_measured() {
    use bench500::training::{measure_dataset_latency, Sampler, SamplerKind, SyntheticFill, SyntheticLabels, SyntheticSource};
    let src = SyntheticSource {
        item_shape: vec![28, 28],
        classes: 10,
        len: 640,
        fill: SyntheticFill::Constant(0.5),
        labels: SyntheticLabels::RoundRobin,
        seed: 0,
    };
    let mut s = Sampler::new(SamplerKind::Synthetic(src), 64).unwrap();
    let rep = measure_dataset_latency(&mut s, None, DType::F32, 30).unwrap();
    assert_eq!(rep.summary.n, 30);
    assert!(rep.summary.median > 0.0 && rep.summary.median.is_finite());
}

#[test]
fn kaiming_bound_is_respected_in_f32() {
    let mut rng = Rng::new(0, 0);
    let t = models::kaiming_uniform(&mut rng, DType::F32, &[100, 10], 100).unwrap();
    assert!(t.to_f64_vec().iter().all(|v| v.abs() <= (0.06f64).sqrt() + 1e-7));
}
