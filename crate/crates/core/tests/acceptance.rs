//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

mod support;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;
use tailmix::augment::{build_batch, rank_confusing, split_head_tail, AugmentConfig, AugmentSource, Provenance};
use tailmix::cam::{cache_all, compute_cam, decompose, normalize_cam, FeatureCache};
use tailmix::config::ExperimentConfig;
use tailmix::data::{generate_synthetic, imbalance_factor, make_profile, Dataset, DatasetManifest, SyntheticSpec};
use tailmix::losses::LossConfig;
use tailmix::metrics::Metrics;
use tailmix::nn::{forward, Arch, ModelParams};
use tailmix::pipeline::{finetune_phase2, train_phase1};
use tailmix::report::{summary_json, Stage, StageSummary};
use tailmix::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    let mut refined = 0;
    for instance in 0..20 {
        let n_classes = rng.gen_range(2..=5);
        let arch = small_arch(n_classes);
        let (params, batch, labels) = random_instance(&mut rng, &arch, 3);
        let counts: Vec<usize> = (0..n_classes).map(|_| rng.gen_range(1..500)).collect();
        let losses = [
            LossConfig::cross_entropy(),
            LossConfig::focal(0.5),
            LossConfig::focal(1.0),
            LossConfig::focal(2.0),
            LossConfig::class_balanced(counts.clone(), 0.9),
            LossConfig::class_balanced(counts, 0.999),
        ];
        for loss in &losses {
            let (err, at, r) = max_grad_error(&params, &batch, &labels, loss);
            checks += 1;
            refined += r;
            if err > worst.0 {
                worst = (err, format!("instance {instance} {:?}: {at}", loss.kind));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-3 && secs < 60.0,
        format!(
            "{checks} checks on 20 instances, max rel err {:.2e} (< 1e-3), {refined} kink-refined coords, {secs:.1}s (< 60s); worst at {}",
            worst.0, worst.1
        ),
    )
}

fn cam_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = Arch {
        in_channels: 3,
        height: 16,
        width: 16,
        channels: vec![4, 6, 8],
        n_classes: 5,
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut params = ModelParams::<f32>::init(&arch, &mut rng).unwrap();
        params.fc.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(-1.0..1.0f32));
        let out = forward(&params, &x).unwrap();
        let (fh, fw) = arch.feature_hw();
        let f = Tensor::new(vec![8, fh, fw], out.features.row(0).to_vec()).unwrap();
        for c in 0..arch.n_classes {
            let cam = compute_cam(&f, params.fc.weight.row(c)).unwrap();
            let mean = cam.data().iter().map(|&v| v as f64).sum::<f64>() / cam.len() as f64;
            let target = out.logits.row(0)[c] as f64 - params.fc.bias.data()[c] as f64;
            worst = worst.max((mean - target).abs());
        }
    }
    outcome(worst < 1e-4, format!("100 samples x 5 classes, max |mean(cam) - (logit - bias)| = {worst:.2e} (< 1e-4)"))
}

fn mask_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut overlaps = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let raw = Tensor::<f64>::from_fn(&[h, w], |_| rng.gen_range(-5.0..5.0));
        let norm = normalize_cam(&raw).unwrap();
        let tau_g = rng.gen_range(0.01..0.99);
        let tau_s = rng.gen_range(tau_g..0.99);
        let (s, g) = decompose(&norm, tau_s, tau_g).unwrap();
        overlaps += s.data().iter().zip(g.data()).filter(|(a, b)| **a != 0.0 && **b != 0.0).count();
    }
    let mut degenerate_ok = true;
    for v in [-3.0, 0.0, 7.0] {
        let raw = Tensor::<f64>::new(vec![3, 3], vec![v; 9]).unwrap();
        let (s, g) = decompose(&normalize_cam(&raw).unwrap(), 0.5, 0.5).unwrap();
        degenerate_ok &= s.data().iter().all(|&x| x == 0.0) && g.data().iter().all(|&x| x == 1.0);
    }
    outcome(
        overlaps == 0 && degenerate_ok,
        format!("1000 random maps, {overlaps} overlapping locations; constant maps all-generic: {degenerate_ok}"),
    )
}

fn batch_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let counts = [60, 40, 20, 9, 5, 3];
    let cache = random_cache(&mut rng, &counts, 6, 3, 3);
    let split = split_head_tail(&counts, 0.7).unwrap();
    let ranking = tailmix::augment::rank_all(&cache, &split, 3).unwrap();
    let source = AugmentSource::new(&cache, 0.5, 0.5).unwrap();
    let mut bad = Vec::new();
    for n_t in 1..=8 {
        for n_a in 0..=4 {
            let cfg = AugmentConfig {
                n_t,
                n_a,
                ..AugmentConfig::default()
            };
            let b = build_batch(&source, &split, &ranking, &cfg, &mut rng).unwrap();
            let tail_labelled = b
                .entries
                .iter()
                .filter(|e| split.tail_class_ids.contains(&e.label))
                .count();
            let head_labelled = b.entries.len() - tail_labelled;
            let ok = b.entries.len() == n_t + n_t * n_a + n_t * (1 + n_a)
                && b.entries.len() == 2 * n_t * (1 + n_a)
                && b.count(Provenance::TailReal) == n_t
                && b.count(Provenance::Augmented) == n_t * n_a
                && b.count(Provenance::HeadReal) == n_t * (1 + n_a)
                && tail_labelled == head_labelled;
            if !ok {
                bad.push((n_t, n_a));
            }
        }
    }
    outcome(bad.is_empty(), format!("40 (N_t, N_a) settings, failing: {bad:?}"))
}

/// Head classes picked one at a time: the largest remaining count, lowest id first.
fn brute_split(counts: &[usize], h_r: f64) -> Option<(usize, Vec<usize>, Vec<usize>)> {
    let total: usize = counts.iter().sum();
    let mut remaining: Vec<usize> = (0..counts.len()).collect();
    let mut picked = Vec::new();
    let mut sum = 0;
    while !remaining.is_empty() {
        let mut best = 0;
        for j in 1..remaining.len() {
            if counts[remaining[j]] > counts[remaining[best]] {
                best = j;
            }
        }
        let c = remaining.remove(best);
        picked.push(c);
        sum += counts[c];
        if sum as f64 / total as f64 >= h_r {
            break;
        }
    }
    if remaining.is_empty() {
        None
    } else {
        let mut tail = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                if counts[remaining[j]] > counts[remaining[best]] {
                    best = j;
                }
            }
            tail.push(remaining.remove(best));
        }
        Some((picked.len(), picked, tail))
    }
}

fn brute_rank(cache: &FeatureCache, head: &[usize], c: usize, n_f: usize) -> Vec<(usize, f64)> {
    let members: Vec<usize> = (0..cache.len()).filter(|&i| cache.labels[i] == c).collect();
    let mut cands: Vec<(usize, f64)> = head
        .iter()
        .map(|&u| {
            let mut s = 0.0f64;
            for &i in &members {
                s += cache.probs.row(i)[u] as f64;
            }
            (u, s / members.len() as f64)
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < n_f && !cands.is_empty() {
        let mut best = 0;
        for j in 1..cands.len() {
            let (a, b) = (cands[j], cands[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = j;
            }
        }
        out.push(cands.remove(best));
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    let mut rejected = 0;
    let mut ranked = 0;
    for _ in 0..200 {
        let n_classes = rng.gen_range(2..=10);
        // few distinct values so that ties are common
        let counts: Vec<usize> = (0..n_classes).map(|_| 2 * rng.gen_range(1..6)).collect();
        let h_r = [0.3, 0.5, 0.6, 0.75, 0.9, rng.gen_range(0.05..0.95)][rng.gen_range(0..6)];
        let expect = brute_split(&counts, h_r);
        let got = split_head_tail(&counts, h_r).ok();
        match (&expect, &got) {
            (None, None) => {
                rejected += 1;
                continue;
            }
            (Some((h, head, tail)), Some(s)) if *h == s.h && *head == s.head_class_ids && *tail == s.tail_class_ids => {}
            _ => {
                mismatches += 1;
                continue;
            }
        }
        let split = got.unwrap();
        let total: usize = counts.iter().sum();
        if total > 100 {
            mismatches += 1;
            continue;
        }
        let mut cache = random_cache(&mut rng, &counts, 2, 2, 2);
        // quantised probabilities produce exact ties between classes
        for v in cache.probs.data_mut() {
            *v = (*v * 4.0).round() / 4.0;
        }
        let n_f = rng.gen_range(1..=4);
        for &c in &split.tail_class_ids {
            ranked += 1;
            let got = rank_confusing(&cache, &split, c, n_f).unwrap();
            if got != brute_rank(&cache, &split.head_class_ids, c, n_f) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances ({rejected} correctly rejected), {ranked} rankings, {mismatches} mismatches"),
    )
}

fn profile_round_trip() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for im in [10.0, 20.0, 50.0, 100.0, 200.0] {
        let counts = make_profile(10, im, 500).unwrap();
        let measured = imbalance_factor(&counts).unwrap();
        let rel = (measured - im).abs() / im;
        pass &= rel <= 0.05;
        parts.push(format!("IM {im}: {measured:.1} ({:+.1}%)", 100.0 * (measured - im) / im));
    }
    outcome(pass, parts.join(", "))
}

struct SeedRun {
    manifest: DatasetManifest,
    test: Dataset,
    params: ModelParams<f32>,
    cache: FeatureCache,
    phase1: Metrics,
    aug: Metrics,
    noaug: Metrics,
    summary: String,
}

fn desk_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg
}

fn noaug(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.phase2.augment.n_a = 0;
    c.phase2.augment.n_t = 32;
    c
}

fn run_seed(seed: u64, dir: &Path) -> SeedRun {
    let cfg = desk_config(seed);
    let counts = make_profile(cfg.n_classes, cfg.imbalance, cfg.n_max).unwrap();
    let (manifest, train, test) =
        generate_synthetic(&SyntheticSpec::desk(cfg.n_classes), &counts, cfg.test_per_class, seed).unwrap();
    let p1 = train_phase1(&cfg, &manifest, &train, &test, dir).unwrap();
    let cache = cache_all(&p1.params, &train, 256).unwrap();
    let aug = finetune_phase2(&cfg, &manifest, &p1.params, &cache, &test, None).unwrap();
    let plain = finetune_phase2(&noaug(&cfg), &manifest, &p1.params, &cache, &test, None).unwrap();
    let stage = |label: &str, phase: &str, metrics: &Metrics| {
        StageSummary::of(&Stage {
            label: label.into(),
            phase: phase.into(),
            arm: label.into(),
            metrics: metrics.clone(),
        })
    };
    let summary = summary_json(&[
        stage("phase1", "phase1", &p1.metrics),
        stage("aug", "phase2", &aug.last_metrics),
        stage("noaug", "phase2", &plain.last_metrics),
    ])
    .unwrap();
    SeedRun {
        manifest,
        test,
        params: p1.params,
        cache,
        phase1: p1.metrics,
        aug: aug.last_metrics,
        noaug: plain.last_metrics,
        summary,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn tail(m: &Metrics) -> f64 {
    m.tail_accuracy().expect("desk benchmark has tail classes")
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient fidelity", gradient_fidelity()),
        ("CAM identity", cam_identity()),
        ("mask decomposition", mask_decomposition()),
        ("batch composition", batch_composition()),
        ("oracle equivalence", oracle_equivalence()),
        ("profile round-trip", profile_round_trip()),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(|s| run_seed(s, &tmp.path().join(format!("seed{s}")))).collect();
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let tail_gain: Vec<f64> = runs.iter().map(|r| tail(&r.aug) - tail(&r.phase1)).collect();
    let overall_change: Vec<f64> = runs.iter().map(|r| r.aug.overall - r.phase1.overall).collect();
    let noaug_gain: Vec<f64> = runs.iter().map(|r| tail(&r.noaug) - tail(&r.phase1)).collect();
    let (mg, mo, mn) = (median(tail_gain.clone()), median(overall_change.clone()), median(noaug_gain.clone()));
    results.push((
        "directional end-to-end",
        outcome(
            mg >= 0.05 && mo >= -0.01 && minutes < 15.0,
            format!(
                "median tail gain {:+.1} pts (>= +5), median overall change {:+.1} pts (>= -1), {minutes:.1} min (< 15); per seed tail {:?}, overall {:?}",
                100.0 * mg,
                100.0 * mo,
                pts(&tail_gain),
                pts(&overall_change)
            ),
        ),
    ));
    results.push((
        "No-Aug control",
        outcome(
            mn < mg,
            format!(
                "median tail gain No-Aug {:+.1} pts < Aug {:+.1} pts; per seed No-Aug {:?}",
                100.0 * mn,
                100.0 * mg,
                pts(&noaug_gain)
            ),
        ),
    ));

    let again = run_seed(0, &tmp.path().join("seed0-again"));
    results.push((
        "determinism",
        outcome(
            again.summary == runs[0].summary,
            format!("seed 0 twice: final metrics JSON identical = {}", again.summary == runs[0].summary),
        ),
    ));

    let r0 = &runs[0];
    let mut heads = Vec::new();
    let mut ran = true;
    for h_r in [0.7, 0.8, 0.9, 0.95, 0.99] {
        let mut cfg = desk_config(0);
        cfg.phase2.h_r = h_r;
        match finetune_phase2(&cfg, &r0.manifest, &r0.params, &r0.cache, &r0.test, None) {
            Ok(o) => heads.push(o.split.h),
            Err(e) => {
                ran = false;
                heads.push(usize::MAX);
                eprintln!("h_r {h_r}: {e}");
            }
        }
    }
    let monotone = heads.windows(2).all(|w| w[0] <= w[1]);
    results.push((
        "ablation sanity",
        outcome(ran && monotone, format!("h_r 0.7..0.99 head counts {heads:?}")),
    ));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn pts(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{:+.1}", 100.0 * x)).collect()
}
