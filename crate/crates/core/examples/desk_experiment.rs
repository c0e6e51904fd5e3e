//! Runs Phase-I once and both Phase-II arms on the synthetic desk benchmark
//! and prints the group accuracies.
//!
//! cargo run --release --example desk_experiment -- [seed] [key=value ...]

use std::time::Instant;

use tailmix::cam::cache_all;
use tailmix::config::ExperimentConfig;
use tailmix::data::{generate_synthetic, make_profile, SyntheticSpec};
use tailmix::pipeline::{finetune_phase2, train_phase1};

fn main() -> tailmix::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::default();
    for a in args {
        cfg.apply_override(&a)?;
    }
    cfg.seed = seed;
    let dir = std::env::temp_dir().join(format!("tailmix-desk-{seed}"));
    let t = Instant::now();
    let counts = make_profile(cfg.n_classes, cfg.imbalance, cfg.n_max)?;
    let (manifest, train, test) = generate_synthetic(&SyntheticSpec::desk(cfg.n_classes), &counts, cfg.test_per_class, seed)?;
    println!("data {:.1}s", t.elapsed().as_secs_f64());
    let params = if std::env::var_os("REUSE").is_some() {
        tailmix::nn::ModelParams::load_checkpoint(&dir.join("checkpoint"))?
    } else {
        let p1 = train_phase1(&cfg, &manifest, &train, &test, &dir)?;
        println!("phase1 {:.1}s per-class {:?}", t.elapsed().as_secs_f64(), p1.metrics.per_class);
        p1.params
    };
    let p1 = &params;
    let cache = cache_all(p1, &train, 256)?;
    for n_a in [3usize, 0] {
        let mut c = cfg.clone();
        c.phase2.augment.n_a = n_a;
        if n_a == 0 {
            c.phase2.augment.n_t = 32;
        }
        let out = finetune_phase2(&c, &manifest, p1, &cache, &test, None)?;
        println!(
            "{}: overall {:.4} -> {:.4} (best {:.4} @{}), tail {:.4} -> {:.4}, skipped {}, fallbacks {}",
            c.phase2_arm(),
            out.initial_metrics.overall,
            out.last_metrics.overall,
            out.best_metrics.overall,
            out.best_iteration,
            out.initial_metrics.tail_accuracy().unwrap_or(0.0),
            out.last_metrics.tail_accuracy().unwrap_or(0.0),
            out.skipped,
            out.fallbacks
        );
        println!("  per-class {:?}", out.last_metrics.per_class);
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
