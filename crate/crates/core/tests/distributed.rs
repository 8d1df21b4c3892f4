use std::collections::BTreeMap;

use bench500::data_io::{synthetic_dataset, Dataset, SyntheticKind};
use bench500::distributed::{
    max_step_spread, partition_dataset, run_distributed, DelayModel, DistConfig, DistRun, Distributed, Sampling,
    Scheme, TransportKind,
};
use bench500::graph::{Events, NetworkGraph};
use bench500::metrics::{test_training, Outcome};
use bench500::models::mlp;
use bench500::tensor::{reduce_norm, NormKind};
use bench500::training::{train, OptimizerKind, SamplerChoice, TrainingConfig, UpdateRule};
use bench500::{DType, Error, Tensor};
use proptest::prelude::*;

fn blobs(n: usize) -> Dataset {
    synthetic_dataset(n, &[8], 4, SyntheticKind::GaussianBlobs { sigma: 0.7 }, 11).unwrap()
}

fn model(dtype: DType) -> NetworkGraph {
    mlp(&[8], &[16], 4, dtype, 5).unwrap()
}

fn config(batch: usize, dtype: DType, steps: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: batch,
        epochs: 1000,
        max_steps: Some(steps),
        lr: 0.1,
        dtype,
        seed: 3,
        instrument: false,
        ..Default::default()
    }
}

fn params(g: &NetworkGraph) -> BTreeMap<String, Tensor> {
    g.gradient_pairs().keys().map(|k| (k.clone(), g.initializer(k).unwrap().clone())).collect()
}

fn max_linf(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    a.iter().map(|(k, t)| reduce_norm(t, &b[k], NormKind::Linf).unwrap()).fold(0.0, f64::max)
}

fn run(g: &NetworkGraph, ds: &Dataset, cfg: &TrainingConfig, workers: usize, scheme: Scheme) -> DistRun {
    run_distributed(g, ds, None, cfg, &DistConfig::new(workers, scheme)).unwrap()
}

#[test]
fn partition_sizes_and_cover() {
    let ds = blobs(10);
    let shards = partition_dataset(&ds, 4, 9).unwrap();
    assert_eq!(shards.iter().map(Dataset::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
    // Every feature row is distinct, so rows identify samples.
    let key = |d: &Dataset, i: usize| -> Vec<u32> {
        d.features.slice_rows(i, 1).unwrap().to_f64_vec().iter().map(|v| (*v as f32).to_bits()).collect()
    };
    let mut seen: Vec<Vec<u32>> = shards.iter().flat_map(|s| (0..s.len()).map(move |i| key(s, i))).collect();
    seen.sort();
    let mut all: Vec<Vec<u32>> = (0..ds.len()).map(|i| key(&ds, i)).collect();
    all.sort();
    assert_eq!(seen, all);
    assert_eq!(partition_dataset(&ds, 1, 0).unwrap()[0].len(), 10);
    assert!(partition_dataset(&ds, 11, 0).is_err());
    assert_ne!(partition_dataset(&ds, 2, 1).unwrap(), partition_dataset(&ds, 2, 2).unwrap());
}

#[test]
fn single_worker_dsgd_is_train() {
    let ds = blobs(256);
    let g = model(DType::F32);
    let mut cfg = config(16, DType::F32, 30);
    cfg.instrument = true;
    let (seq, stream) = train(g.clone(), &ds, None, &cfg, &mut Events::new()).unwrap();
    let d = run(&g, &ds, &cfg, 1, Scheme::Dsgd);
    assert_eq!(params(&seq), d.replicas[0]);
    assert_eq!(stream.to_jsonl(false), d.stream.to_jsonl(false));
    assert_eq!(d.stats[0].training().bytes_sent, 0);
}

#[test]
fn dsgd_matches_sequential_large_batch() {
    let ds = blobs(640);
    let g = model(DType::F64);
    let seq_cfg = config(64, DType::F64, 100);
    let (seq, _) = train(g.clone(), &ds, None, &seq_cfg, &mut Events::new()).unwrap();
    for p in [2, 4] {
        let d = run(&g, &ds, &config(64 / p, DType::F64, 100), p, Scheme::Dsgd);
        assert!(d.replicas_identical());
        let err = max_linf(&params(&seq), &d.replicas[0]);
        assert!(err <= 1e-8, "p={p}: {err}");
        assert_ne!(params(&g), d.replicas[0]);
    }
}

#[test]
fn consistent_server_equals_dsgd_bitwise() {
    let ds = blobs(320);
    for dtype in [DType::F32, DType::F64] {
        let g = model(dtype);
        let cfg = config(8, dtype, 40);
        let d = run(&g, &ds, &cfg, 4, Scheme::Dsgd);
        let ps = run(&g, &ds, &cfg, 4, Scheme::Pssgd);
        assert!(ps.replicas_identical());
        assert_eq!(d.replicas[0], ps.replicas[0]);
        let ratio = ps.report().logical_per_step / d.report().logical_per_step;
        assert_eq!(ratio, 2.0);
    }
}

#[test]
fn dsgd_volume_matches_ring_accounting() {
    // fc1.w is 8×16, fc1.b 16, fc2.w 16×4, fc2.b 4: all divisible by 4.
    let ds = blobs(320);
    let g = model(DType::F32);
    let d = run(&g, &ds, &config(8, DType::F32, 10), 4, Scheme::Dsgd);
    let model_bytes: usize = params(&g).values().map(Tensor::size_bytes).sum();
    for s in &d.stats {
        assert_eq!(s.per_step.len(), 10);
        for v in &s.per_step {
            assert_eq!(v.bytes_sent as f64, 2.0 * 3.0 / 4.0 * model_bytes as f64);
            assert_eq!(v.logical as usize, model_bytes);
        }
    }
    let agg = d.report().aggregate;
    assert_eq!(agg.bytes_sent, agg.bytes_recv);
    assert_eq!(agg.msgs_sent, agg.msgs_recv);
}

#[test]
fn dpsgd_volume_is_constant_in_world_size() {
    let ds = blobs(640);
    let g = model(DType::F32);
    let per_node: Vec<f64> =
        [2, 4, 8].iter().map(|&p| run(&g, &ds, &config(8, DType::F32, 5), p, Scheme::Dpsgd).report().sent_per_step).collect();
    assert!(per_node.windows(2).all(|w| w[0] == w[1]), "{per_node:?}");
    let dense: Vec<f64> =
        [2, 4, 8].iter().map(|&p| run(&g, &ds, &config(8, DType::F32, 5), p, Scheme::Dsgd).report().sent_per_step).collect();
    assert!(dense[0] < dense[1] && dense[1] < dense[2]);
}

#[test]
fn model_averaging_syncs_every_k_steps() {
    let ds = blobs(640);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 20);
    let m = run(&g, &ds, &cfg, 4, Scheme::Mavg { every: 10 });
    assert!(m.replicas_identical());
    let off = run(&g, &ds, &config(8, DType::F32, 15), 4, Scheme::Mavg { every: 10 });
    assert!(!off.replicas_identical());
    let steps_with_traffic = m.stats[0].per_step.iter().filter(|v| v.bytes_sent > 0).count();
    assert_eq!(steps_with_traffic, 2);
}

#[test]
fn sparse_scheme_trains_and_stays_consistent() {
    let ds = blobs(640);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 30);
    let s = run(&g, &ds, &cfg, 4, Scheme::Topk { density: 0.1 });
    assert!(s.replicas_identical());
    let d = run(&g, &ds, &cfg, 4, Scheme::Dsgd);
    assert!(s.report().sent_per_step < d.report().sent_per_step);
    let full = run(&g, &ds, &config(8, DType::F32, 5), 4, Scheme::Topk { density: 1.0 });
    let dense = run(&g, &ds, &config(8, DType::F32, 5), 4, Scheme::Dsgd);
    assert!(max_linf(&full.replicas[0], &dense.replicas[0]) <= 1e-5);
}

#[test]
fn zero_steps_move_nothing() {
    let ds = blobs(64);
    let g = model(DType::F32);
    let mut cfg = config(8, DType::F32, 10);
    cfg.epochs = 0;
    for scheme in [Scheme::Dsgd, Scheme::Pssgd, Scheme::Asgd] {
        let r = run(&g, &ds, &cfg, 2, scheme);
        assert_eq!(r.steps, 0);
        assert!(r.stats.iter().all(|s| s.total() == Default::default()));
        assert_eq!(r.replicas[0], params(&g));
    }
}

#[test]
fn simulator_is_deterministic() {
    let ds = blobs(320);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 25);
    for scheme in [Scheme::Dpsgd, Scheme::Asgd, Scheme::Ssp { staleness: 2 }] {
        let a = run(&g, &ds, &cfg, 4, scheme);
        let b = run(&g, &ds, &cfg, 4, scheme);
        assert_eq!(a.replicas, b.replicas);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.log, b.log);
    }
}

#[test]
fn zero_staleness_is_the_consistent_server() {
    let ds = blobs(320);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 30);
    let ps = run(&g, &ds, &cfg, 4, Scheme::Pssgd);
    let ssp = run(&g, &ds, &cfg, 4, Scheme::Ssp { staleness: 0 });
    assert_eq!(params(&ssp.graph), ps.replicas[0]);
    assert_eq!(max_step_spread(&ssp.log, 4), 0);
    assert_eq!(ssp.report().logical_per_step, ps.report().logical_per_step);
}

#[test]
fn staleness_bound_holds_in_the_event_log() {
    let ds = blobs(640);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 60);
    let mut dist = DistConfig::new(4, Scheme::Ssp { staleness: 3 });
    dist.delays = DelayModel { seed: 4, compute_ns: [100, 5_000], latency_ns: 10, round_robin: false };
    let r = run_distributed(&g, &ds, None, &cfg, &dist).unwrap();
    let spread = max_step_spread(&r.log, 4);
    assert!(spread <= 3 && spread > 0, "{spread}");
    dist.scheme = Scheme::Asgd;
    let free = run_distributed(&g, &ds, None, &cfg, &dist).unwrap();
    assert!(max_step_spread(&free.log, 4) > 3);
}

#[test]
fn round_robin_async_is_interleaved_sgd() {
    let ds = blobs(320);
    let g = model(DType::F64);
    let p = 4;
    let mut dist = DistConfig::new(p, Scheme::Asgd);
    dist.delays.round_robin = true;
    let r = run_distributed(&g, &ds, None, &config(8, DType::F64, 20), &dist).unwrap();
    // Slicing each global batch of 32 into 4 consecutive batches of 8 is a
    // sequential run over the same permutation with batch 8.
    let (seq, _) = train(g.clone(), &ds, None, &config(8, DType::F64, 20 * p), &mut Events::new()).unwrap();
    assert_eq!(params(&r.graph), params(&seq));
}

#[test]
fn tcp_matches_simulator() {
    let ds = blobs(320);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 10);
    for scheme in [Scheme::Dsgd, Scheme::Pssgd] {
        let sim = run(&g, &ds, &cfg, 3, scheme);
        let mut dist = DistConfig::new(3, scheme);
        dist.transport = TransportKind::Tcp;
        let tcp = run_distributed(&g, &ds, None, &cfg, &dist).unwrap();
        assert_eq!(sim.replicas, tcp.replicas);
        assert_eq!(sim.stats, tcp.stats);
    }
}

#[test]
fn sharded_sampling_runs_on_disjoint_data() {
    let ds = blobs(100);
    let g = model(DType::F32);
    let mut dist = DistConfig::new(3, Scheme::Dsgd);
    dist.sampling = Sampling::Sharded;
    let mut cfg = config(8, DType::F32, 1000);
    cfg.epochs = 2;
    let r = run_distributed(&g, &ds, None, &cfg, &dist).unwrap();
    // Shards of 34, 33, 33 give 4 full batches each per epoch.
    assert_eq!(r.steps, 8);
    assert!(r.replicas_identical());
}

#[test]
fn invalid_worlds_are_rejected() {
    let ds = blobs(64);
    let g = model(DType::F32);
    let cfg = config(8, DType::F32, 2);
    let bad = |dist: DistConfig| run_distributed(&g, &ds, None, &cfg, &dist).is_err();
    assert!(bad(DistConfig::new(0, Scheme::Dsgd)));
    assert!(bad(DistConfig::new(3, Scheme::Topk { density: 0.1 })));
    assert!(bad(DistConfig::new(2, Scheme::Topk { density: 1.5 })));
    assert!(bad(DistConfig::new(2, Scheme::Mavg { every: 0 })));
    assert!(bad(DistConfig { transport: TransportKind::Tcp, ..DistConfig::new(2, Scheme::Asgd) }));
    let mut adam = cfg.clone();
    adam.optimizer = OptimizerKind::Rule(UpdateRule::adam());
    assert!(run_distributed(&g, &ds, None, &adam, &DistConfig::new(2, Scheme::Pssgd)).is_ok());
    adam.optimizer = "accelegrad".parse().unwrap();
    assert!(run_distributed(&g, &ds, None, &adam, &DistConfig::new(2, Scheme::Pssgd)).is_err());
    assert!(run_distributed(&g, &ds, None, &adam, &DistConfig::new(2, Scheme::Dsgd)).is_ok());
}

#[test]
fn divergence_surfaces_from_workers() {
    let ds = blobs(128);
    let g = model(DType::F32);
    let mut cfg = config(8, DType::F32, 200);
    cfg.lr = 1e6;
    cfg.sampler = SamplerChoice::Sequential;
    let scheme = Distributed(DistConfig::new(2, Scheme::Dsgd));
    let rep = test_training(&scheme, g.clone(), &ds, None, &cfg).unwrap();
    assert!(matches!(rep.outcome, Outcome::Diverged { .. }), "{:?}", rep.outcome);
    let err = run_distributed(&g, &ds, None, &cfg, &DistConfig::new(2, Scheme::Asgd)).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
}

#[test]
fn distributed_scheme_reports_accuracy() {
    let train_ds = blobs(512);
    let test_ds = synthetic_dataset(200, &[8], 4, SyntheticKind::GaussianBlobs { sigma: 0.7 }, 12).unwrap();
    let g = model(DType::F32);
    let mut cfg = config(16, DType::F32, 1000);
    cfg.epochs = 3;
    cfg.instrument = true;
    let rep = test_training(&Distributed(DistConfig::new(2, Scheme::Dsgd)), g, &train_ds, Some(&test_ds), &cfg).unwrap();
    assert_eq!(rep.outcome, Outcome::Completed);
    assert!(rep.final_test_accuracy.unwrap() > 0.9);
    assert_eq!(rep.stream.values("test_accuracy").len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sparse_residual_conserves_mass(values in proptest::collection::vec(-10.0f32..10.0, 1..64), d in 0.05f64..1.0) {
        let acc = Tensor::from_vec([values.len()], values).unwrap();
        let (sent, rest) = bench500::distributed::topk_split(&acc, d).unwrap();
        let mut back = rest.to_f64_vec();
        for (i, v) in sent.indices.iter().zip(&sent.values) {
            prop_assert_eq!(back[*i as usize], 0.0);
            back[*i as usize] = *v as f64;
        }
        prop_assert_eq!(Tensor::from_f64_values(DType::F32, acc.shape().to_vec(), &back), acc);
    }

    #[test]
    fn partitions_are_balanced(n in 1usize..60, p in 1usize..12, seed in 0u64..100) {
        let ds = synthetic_dataset(n, &[2], 2, SyntheticKind::Constant(1.0), 0).unwrap();
        match partition_dataset(&ds, p, seed) {
            Ok(shards) => {
                prop_assert!(p <= n);
                let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
                prop_assert_eq!(sizes.iter().sum::<usize>(), n);
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            Err(_) => prop_assert!(p > n),
        }
    }
}
