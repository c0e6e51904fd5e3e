mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::random_cache;
use tailmix::augment::{build_batch, rank_all, split_head_tail, synthesize_sample, AugmentConfig, AugmentSource};

fn features(k: usize, l: usize, zero_every: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, k * l).prop_map(move |mut v| {
        for loc in (0..l).step_by(zero_every.max(1)).skip(1) {
            for ch in 0..k {
                v[ch * l + loc] = 0.0;
            }
        }
        v
    })
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>, Vec<usize>, Vec<usize>, f64, u64)> {
    (1usize..6, 2usize..17, 2usize..5).prop_flat_map(|(k, l, z)| {
        (
            Just(k),
            Just(l),
            features(k, l, z),
            features(k, l, z),
            prop::collection::vec(0..l, 0..l),
            prop::collection::vec(0..l, 0..l),
            0.3f64..0.7,
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn synthesized_vector_is_the_mean_of_its_draws((k, l, tail, conf, spec, gen, gamma, seed) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(s) = synthesize_sample(&tail, &spec, &conf, &gen, k, gamma, &mut rng).unwrap() else {
            return Ok(());
        };
        prop_assert!(!s.specific_draws.is_empty());
        prop_assert!(!s.generic_draws.is_empty());
        prop_assert_eq!(s.specific_draws.len() + s.generic_draws.len(), l);
        prop_assert_eq!(s.specific_draws.len(), ((gamma * l as f64).floor() as usize).clamp(1, l - 1));
        let nonzero = |f: &[f32], loc: usize| (0..k).any(|ch| f[ch * l + loc] != 0.0);
        for &loc in &s.specific_draws {
            prop_assert!(nonzero(&tail, loc));
            prop_assert!(s.specific_fallback || spec.contains(&loc));
        }
        for &loc in &s.generic_draws {
            prop_assert!(nonzero(&conf, loc));
            prop_assert!(s.generic_fallback || gen.contains(&loc));
        }
        for ch in 0..k {
            let drawn: Vec<f64> = s.specific_draws.iter().map(|&i| tail[ch * l + i] as f64)
                .chain(s.generic_draws.iter().map(|&i| conf[ch * l + i] as f64))
                .collect();
            let mean = drawn.iter().sum::<f64>() / l as f64;
            let (lo, hi) = drawn.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let p = s.pooled[ch] as f64;
            prop_assert!((p - mean).abs() < 1e-5);
            prop_assert!(p >= lo - 1e-5 && p <= hi + 1e-5);
        }
    }

    #[test]
    fn same_seed_same_batches(seed in any::<u64>(), n_t in 1usize..6, n_a in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = [40, 25, 12, 6, 3];
        let cache = random_cache(&mut rng, &counts, 4, 3, 3);
        let split = split_head_tail(&counts, 0.6).unwrap();
        let ranking = rank_all(&cache, &split, 2).unwrap();
        let source = AugmentSource::new(&cache, 0.5, 0.5).unwrap();
        let cfg = AugmentConfig { n_t, n_a, ..AugmentConfig::default() };
        let run = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..5).map(|_| build_batch(&source, &split, &ranking, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(seed), run(seed));
    }

    #[test]
    fn ranking_lists_head_classes_only(seed in any::<u64>(), n_f in 1usize..6, h_r in 0.3f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = [50, 30, 30, 10, 4, 2];
        let cache = random_cache(&mut rng, &counts, 2, 2, 2);
        let split = split_head_tail(&counts, h_r).unwrap();
        let ranking = rank_all(&cache, &split, n_f).unwrap();
        for &c in &split.tail_class_ids {
            let list = &ranking.entries[&c];
            prop_assert_eq!(list.len(), n_f.min(split.h));
            for w in list.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
            for (u, _) in list {
                prop_assert!(split.head_class_ids.contains(u));
            }
        }
        // the split partitions the classes
        let mut all: Vec<usize> = split.head_class_ids.iter().chain(&split.tail_class_ids).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
    }
}
