use std::fs;
use std::path::Path;

use tailmix::cam::{cache_all, compute_cam, FeatureCache};
use tailmix::config::ExperimentConfig;
use tailmix::data::{generate_synthetic, make_profile, Dataset, DatasetManifest, SyntheticSpec};
use tailmix::error::Error;
use tailmix::metrics::Metrics;
use tailmix::nn::{forward, lr_schedule, ModelParams};
use tailmix::pipeline::{evaluate, finetune_phase2, train_phase1, RunRecord, RUN_LOG};
use tailmix::Tensor;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.n_classes = 2;
    cfg.channels = vec![4, 8, 8];
    cfg.phase1.epochs = 20;
    cfg.phase1.decay_every = 10;
    cfg.phase1.batch_size = 16;
    cfg.phase1.base_lr = 0.05;
    cfg
}

fn tiny_data() -> (DatasetManifest, Dataset, Dataset) {
    generate_synthetic(&SyntheticSpec::desk(2), &[50, 50], 20, 11).unwrap()
}

fn small_lt() -> (ExperimentConfig, DatasetManifest, Dataset, Dataset) {
    let mut cfg = ExperimentConfig::default();
    cfg.n_classes = 4;
    cfg.channels = vec![4, 8, 8];
    cfg.phase1.epochs = 2;
    cfg.phase1.batch_size = 32;
    cfg.phase2.iterations = 60;
    cfg.phase2.eval_every = 20;
    cfg.phase2.h_r = 0.6;
    cfg.phase2.augment.n_t = 4;
    let counts = make_profile(4, 10.0, 60).unwrap();
    let (m, train, test) = generate_synthetic(&SyntheticSpec::desk(4), &counts, 10, 3).unwrap();
    (cfg, m, train, test)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn separable_pair_is_learned() {
    let cfg = tiny_config();
    let (manifest, train, test) = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let out = train_phase1(&cfg, &manifest, &train, &test, dir.path()).unwrap();
    assert!(out.metrics.overall >= 0.95, "accuracy {}", out.metrics.overall);
    let lrs: Vec<f64> = out.record.events.iter().map(|e| e.lr).collect();
    let expect: Vec<f64> = (0..20).map(|e| if e < 10 { 0.05 } else { 0.05 * 0.1 }).collect();
    assert_eq!(lrs.len(), expect.len());
    for (a, b) in lrs.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{lrs:?}");
    }
    let seqs: Vec<u64> = out.record.events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..20).collect::<Vec<u64>>());
    let logged = RunRecord::load(&dir.path().join(RUN_LOG), "phase1").unwrap();
    assert_eq!(logged, out.record);
    let saved = ModelParams::load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(saved.fingerprint(), out.params.fingerprint());
}

#[test]
fn lr_schedule_steps() {
    assert_eq!(lr_schedule(0, 0.1, 20, 0.1), 0.1);
    assert_eq!(lr_schedule(19, 0.1, 20, 0.1), 0.1);
    assert!((lr_schedule(20, 0.1, 20, 0.1) - 0.01).abs() < 1e-15);
    assert!((lr_schedule(39, 0.1, 20, 0.1) - 0.01).abs() < 1e-15);
}

#[test]
fn fixed_seed_reproduces_phase1() {
    let (mut cfg, manifest, train, test) = small_lt();
    cfg.phase1.epochs = 1;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = train_phase1(&cfg, &manifest, &train, &test, a.path()).unwrap();
    let y = train_phase1(&cfg, &manifest, &train, &test, b.path()).unwrap();
    assert_eq!(x.params.fingerprint(), y.params.fingerprint());
    assert_eq!(x.metrics, y.metrics);
    assert_eq!(dir_bytes(&a.path().join("checkpoint")), dir_bytes(&b.path().join("checkpoint")));
    cfg.seed = 1;
    let c = tempfile::tempdir().unwrap();
    let z = train_phase1(&cfg, &manifest, &train, &test, c.path()).unwrap();
    assert_ne!(x.params.fingerprint(), z.params.fingerprint());
}

#[test]
fn phase2_touches_only_the_classifier() {
    let (cfg, manifest, train, test) = small_lt();
    let dir = tempfile::tempdir().unwrap();
    let p1 = train_phase1(&cfg, &manifest, &train, &test, &dir.path().join("p1")).unwrap();
    let cache = cache_all(&p1.params, &train, 64).unwrap();
    let out = dir.path().join("p2");
    let p2 = finetune_phase2(&cfg, &manifest, &p1.params, &cache, &test, Some(&out)).unwrap();
    assert_eq!(p2.last.extractor_fingerprint(), p1.params.extractor_fingerprint());
    assert_eq!(p2.best.extractor_fingerprint(), p1.params.extractor_fingerprint());
    assert_ne!(p2.last.fc.weight, p1.params.fc.weight);
    let steps: Vec<usize> = p2.record.events.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![0, 20, 40, 60]);
    let best_acc = p2.record.events.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(p2.best_metrics.overall, best_acc);
    let first_best = p2.record.events.iter().find(|e| e.val_accuracy == best_acc).unwrap();
    assert_eq!(first_best.step, p2.best_iteration);
    for name in ["checkpoint_last", "checkpoint_best", "run.jsonl", "metrics.json"] {
        assert!(out.join(name).exists(), "{name}");
    }

    // same inputs twice: identical outputs
    let again = finetune_phase2(&cfg, &manifest, &p1.params, &cache, &test, None).unwrap();
    assert_eq!(again.last.fingerprint(), p2.last.fingerprint());
    assert_eq!(again.record, p2.record);

    // evaluation is bit-identical on re-run
    let e1 = evaluate(&p2.last, &test, &manifest.counts).unwrap();
    let e2 = evaluate(&p2.last, &test, &manifest.counts).unwrap();
    assert_eq!(serde_json::to_string(&e1).unwrap(), serde_json::to_string(&e2).unwrap());
    assert_eq!(e1, p2.last_metrics);
}

#[test]
fn phase2_rejects_a_foreign_cache() {
    let (cfg, manifest, train, test) = small_lt();
    let dir = tempfile::tempdir().unwrap();
    let p1 = train_phase1(&cfg, &manifest, &train, &test, dir.path()).unwrap();
    let mut cache = cache_all(&p1.params, &train, 64).unwrap();
    cache.fingerprint = "0".repeat(64);
    match finetune_phase2(&cfg, &manifest, &p1.params, &cache, &test, None) {
        Err(e @ Error::Fingerprint(_)) => assert!(e.to_string().contains("cache-features"), "{e}"),
        other => panic!("expected a fingerprint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let (mut cfg, manifest, train, test) = small_lt();
    cfg.phase1.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let good = train_phase1(&cfg, &manifest, &train, &test, dir.path()).unwrap();
    cfg.phase1.base_lr = 1e30;
    let err = train_phase1(&cfg, &manifest, &train, &test, dir.path()).err().expect("must diverge");
    assert!(matches!(err, Error::Numerical { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("checkpoint"), "{err}");
    let kept = ModelParams::load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(kept.fingerprint(), good.params.fingerprint());
}

#[test]
fn cache_is_reproducible_and_consistent() {
    let (cfg, manifest, train, test) = small_lt();
    let dir = tempfile::tempdir().unwrap();
    let p1 = train_phase1(&cfg, &manifest, &train, &test, &dir.path().join("p1")).unwrap();
    let a = cache_all(&p1.params, &train, 64).unwrap();
    let b = cache_all(&p1.params, &train, 7).unwrap();
    a.save(&dir.path().join("a")).unwrap();
    b.save(&dir.path().join("b")).unwrap();
    assert_eq!(dir_bytes(&dir.path().join("a")), dir_bytes(&dir.path().join("b")));
    let loaded = FeatureCache::load(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, a);

    let k = a.feature_channels();
    let (h, w) = (a.features.dim(2), a.features.dim(3));
    let x = tailmix::data::to_model_input(&train.images);
    let fwd = forward(&p1.params, &x).unwrap();
    for i in 0..a.len() {
        let f = Tensor::new(vec![k, h, w], fwd.features.row(i).to_vec()).unwrap();
        let cam = compute_cam(&f, p1.params.fc.weight.row(a.labels[i])).unwrap();
        for (s, r) in a.cams.row(i).iter().zip(cam.data()) {
            assert!((s - r).abs() <= 1e-6, "sample {i}: stored {s} recomputed {r}");
        }
    }
}

#[test]
fn perfect_and_constant_predictors() {
    let train_counts = [500, 50, 10];
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let perfect = Metrics::from_predictions(&labels, &labels, &train_counts).unwrap();
    assert_eq!(perfect.overall, 1.0);
    assert_eq!(perfect.tail_accuracy(), Some(1.0));
    let constant = Metrics::from_predictions(&[0; 30], &labels, &train_counts).unwrap();
    assert!((constant.overall - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(constant.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
    assert_eq!(constant.groups.many, Some(1.0));
    assert_eq!(constant.tail_accuracy(), Some(0.0));
}
