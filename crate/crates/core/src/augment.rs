//! Head/tail partition, confusing-class ranking and online synthesis of
//! tail-class training vectors.
//!
//! A synthesized sample for tail class `c` mixes feature vectors drawn from
//! the class-specific region of a real class-`c` sample with vectors drawn
//! from the class-generic region of a sample of one of `c`'s confusing head
//! classes. Since only the classifier after global average pooling is
//! trained on these samples, the mixture is produced directly as its pooled
//! vector.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cam::FeatureCache;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTailSplit {
    /// Number of head classes.
    pub h: usize,
    pub h_r_target: f64,
    /// Head classes by descending training count.
    pub head_class_ids: Vec<usize>,
    /// Tail classes by descending training count.
    pub tail_class_ids: Vec<usize>,
}

/// Smallest `h` such that the `h` largest classes hold at least `h_r_target`
/// of all training samples. Classes with equal counts keep index order.
pub fn split_head_tail(counts: &[usize], h_r_target: f64) -> Result<HeadTailSplit> {
    if counts.len() < 2 {
        return Err(Error::invalid("counts", "need at least two classes"));
    }
    if !(h_r_target > 0.0 && h_r_target < 1.0) {
        return Err(Error::invalid(
            "h_r_target",
            format!("must lie strictly inside (0, 1), got {h_r_target}"),
        ));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let total: usize = counts.iter().sum();
    let mut cumulative = 0usize;
    let mut h = counts.len();
    for (i, &c) in order.iter().enumerate() {
        cumulative += counts[c];
        if cumulative as f64 / total as f64 >= h_r_target {
            h = i + 1;
            break;
        }
    }
    if h >= counts.len() {
        return Err(Error::invalid(
            "h_r_target",
            format!("no tail classes under target {h_r_target}"),
        ));
    }
    Ok(HeadTailSplit {
        h,
        h_r_target,
        head_class_ids: order[..h].to_vec(),
        tail_class_ids: order[h..].to_vec(),
    })
}

/// For every tail class, its most confusing head classes with their mean
/// softmax score over the tail class's training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRanking {
    pub n_f: usize,
    pub entries: BTreeMap<usize, Vec<(usize, f64)>>,
}

/// Rank `head_ids` by their mean probability over `rows` (descending, ties
/// by ascending class id) and keep the first `n_f`.
pub fn rank_from_probs<'a>(
    rows: impl IntoIterator<Item = &'a [f32]>,
    head_ids: &[usize],
    tail_class: usize,
    n_f: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut sums = vec![0.0f64; head_ids.len()];
    let mut n = 0usize;
    for row in rows {
        for (s, &c) in sums.iter_mut().zip(head_ids) {
            *s += row[c] as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("tail class {tail_class} has no cached samples")));
    }
    let mut scored: Vec<(usize, f64)> = head_ids
        .iter()
        .zip(&sums)
        .filter(|(&c, _)| c != tail_class)
        .map(|(&c, &s)| (c, s / n as f64))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(n_f);
    Ok(scored)
}

pub fn rank_confusing(
    cache: &FeatureCache,
    split: &HeadTailSplit,
    tail_class: usize,
    n_f: usize,
) -> Result<Vec<(usize, f64)>> {
    if !split.tail_class_ids.contains(&tail_class) {
        return Err(Error::invalid("tail_class", format!("class {tail_class} is not a tail class")));
    }
    let rows = (0..cache.len())
        .filter(|&i| cache.labels[i] == tail_class)
        .map(|i| cache.probs.row(i));
    rank_from_probs(rows, &split.head_class_ids, tail_class, n_f)
}

pub fn rank_all(cache: &FeatureCache, split: &HeadTailSplit, n_f: usize) -> Result<ConfusionRanking> {
    let mut entries = BTreeMap::new();
    for &c in &split.tail_class_ids {
        entries.insert(c, rank_confusing(cache, split, c, n_f)?);
    }
    Ok(ConfusionRanking { n_f, entries })
}

/// Knobs of the online batch builder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub n_t: usize,
    pub n_a: usize,
    pub n_f: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub tau_s: f64,
    pub tau_g: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_t: 8,
            n_a: 3,
            n_f: 3,
            gamma_min: 0.3,
            gamma_max: 0.7,
            tau_s: 0.5,
            tau_g: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::invalid("n_t", "must be at least 1"));
        }
        if self.n_f == 0 && self.n_a > 0 {
            return Err(Error::invalid("n_f", "augmentation needs at least one confusing class"));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max && self.gamma_max < 1.0) {
            return Err(Error::invalid(
                "gamma",
                format!("need 0 < gamma_min <= gamma_max < 1, got [{}, {}]", self.gamma_min, self.gamma_max),
            ));
        }
        Ok(())
    }

    /// Entries per batch: `2 * n_t * (1 + n_a)`.
    pub fn batch_size(&self) -> usize {
        2 * self.n_t * (1 + self.n_a)
    }
}

/// Draw result of [`synthesize_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    /// Mean of all drawn vectors, `[K]`.
    pub pooled: Vec<f32>,
    /// Locations drawn from the tail sample.
    pub specific_draws: Vec<usize>,
    /// Locations drawn from the confusing-class sample.
    pub generic_draws: Vec<usize>,
    pub specific_fallback: bool,
    pub generic_fallback: bool,
}

fn nonzero_locations(features: &[f32], l: usize, candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    candidates
        .filter(|&loc| features.iter().skip(loc).step_by(l).any(|&v| v != 0.0))
        .collect()
}

/// Mix `floor(gamma * L)` (clamped to `[1, L - 1]`) class-specific vectors of
/// the tail sample with class-generic vectors of the confusing sample, drawn
/// with replacement and skipping all-zero vectors. Features are `[K, L]`.
///
/// An empty region falls back to every non-zero location of that sample.
/// Returns `None` when a sample has no non-zero location at all.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_sample(
    tail_features: &[f32],
    tail_specific: &[usize],
    confusing_features: &[f32],
    confusing_generic: &[usize],
    k: usize,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<Option<Synthesized>> {
    if k == 0 || !tail_features.len().is_multiple_of(k) || tail_features.len() != confusing_features.len() {
        return Err(Error::shape(
            "synthesize_sample",
            format!(
                "feature buffers of {} and {} values for {k} channels",
                tail_features.len(),
                confusing_features.len()
            ),
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    let l = tail_features.len() / k;
    if l < 2 {
        return Err(Error::invalid("locations", "mixing needs at least two spatial locations"));
    }
    let n_specific = ((gamma * l as f64).floor() as usize).clamp(1, l - 1);

    let mut specific = nonzero_locations(tail_features, l, tail_specific.iter().copied());
    let specific_fallback = specific.is_empty();
    if specific_fallback {
        specific = nonzero_locations(tail_features, l, 0..l);
    }
    let mut generic = nonzero_locations(confusing_features, l, confusing_generic.iter().copied());
    let generic_fallback = generic.is_empty();
    if generic_fallback {
        generic = nonzero_locations(confusing_features, l, 0..l);
    }
    if specific.is_empty() || generic.is_empty() {
        return Ok(None);
    }

    let specific_draws: Vec<usize> = (0..n_specific).map(|_| specific[rng.gen_range(0..specific.len())]).collect();
    let generic_draws: Vec<usize> = (0..l - n_specific).map(|_| generic[rng.gen_range(0..generic.len())]).collect();
    let mut pooled = vec![0.0f32; k];
    for (ch, p) in pooled.iter_mut().enumerate() {
        let tail_ch = &tail_features[ch * l..(ch + 1) * l];
        let conf_ch = &confusing_features[ch * l..(ch + 1) * l];
        let sum: f32 = specific_draws.iter().map(|&i| tail_ch[i]).sum::<f32>()
            + generic_draws.iter().map(|&i| conf_ch[i]).sum::<f32>();
        *p = sum / l as f32;
    }
    Ok(Some(Synthesized {
        pooled,
        specific_draws,
        generic_draws,
        specific_fallback,
        generic_fallback,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TailReal,
    Augmented,
    HeadReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    #[serde(skip)]
    pub pooled: Vec<f32>,
    pub label: usize,
    pub provenance: Provenance,
    /// Real sample index; for augmented entries, the tail sample.
    pub sample: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusing_sample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Phase2Batch {
    pub entries: Vec<BatchEntry>,
    /// Augmented samples that could not be drawn.
    pub skipped: usize,
    /// Draws that fell back from an empty mask region.
    pub fallbacks: usize,
}

impl Phase2Batch {
    pub fn count(&self, p: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == p).count()
    }

    /// `([B, K], labels)` for the classifier.
    pub fn to_tensors(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        let k = self.entries.first().map(|e| e.pooled.len()).unwrap_or(0);
        let data: Vec<f32> = self.entries.iter().flat_map(|e| e.pooled.iter().copied()).collect();
        let labels = self.entries.iter().map(|e| e.label).collect();
        Ok((Tensor::new(vec![self.entries.len(), k], data)?, labels))
    }

    /// One JSON object per entry with its provenance, tagged with `iteration`.
    pub fn provenance_jsonl(&self, iteration: usize) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            iteration: usize,
            #[serde(flatten)]
            entry: &'a BatchEntry,
        }
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(&Line { iteration, entry })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Per-sample draw supports and pooled vectors precomputed from a cache.
pub struct AugmentSource<'a> {
    cache: &'a FeatureCache,
    specific: Vec<Vec<usize>>,
    generic: Vec<Vec<usize>>,
    pooled: Vec<Vec<f32>>,
    by_class: Vec<Vec<usize>>,
}

impl<'a> AugmentSource<'a> {
    pub fn new(cache: &'a FeatureCache, tau_s: f64, tau_g: f64) -> Result<Self> {
        let mut specific = Vec::with_capacity(cache.len());
        let mut generic = Vec::with_capacity(cache.len());
        for i in 0..cache.len() {
            let rec = cache.record(i, tau_s, tau_g)?;
            specific.push(rec.specific_locations());
            generic.push(rec.generic_locations());
        }
        Ok(Self {
            cache,
            specific,
            generic,
            pooled: (0..cache.len()).map(|i| cache.pooled(i)).collect(),
            by_class: cache.indices_by_class(),
        })
    }

    pub fn cache(&self) -> &FeatureCache {
        self.cache
    }

    fn pick_class_sample(&self, classes: &[usize], rng: &mut impl Rng) -> Result<(usize, usize)> {
        let class = classes[rng.gen_range(0..classes.len())];
        let members = &self.by_class[class];
        if members.is_empty() {
            return Err(Error::Data(format!("class {class} has no cached samples")));
        }
        Ok((class, members[rng.gen_range(0..members.len())]))
    }
}

const SYNTHESIS_ATTEMPTS: usize = 8;

/// One fine-tuning batch: `n_t` real tail samples, `n_a` synthesized samples
/// for each of them, and `n_t * (1 + n_a)` real head samples.
pub fn build_batch(
    source: &AugmentSource,
    split: &HeadTailSplit,
    ranking: &ConfusionRanking,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Phase2Batch> {
    cfg.validate()?;
    if split.head_class_ids.is_empty() || split.tail_class_ids.is_empty() {
        return Err(Error::invalid("split", "both head and tail sides must be non-empty"));
    }
    let k = source.cache.feature_channels();
    let mut batch = Phase2Batch::default();
    for _ in 0..cfg.n_t {
        let (c, tail_i) = source.pick_class_sample(&split.tail_class_ids, rng)?;
        batch.entries.push(BatchEntry {
            pooled: source.pooled[tail_i].clone(),
            label: c,
            provenance: Provenance::TailReal,
            sample: tail_i,
            confusing_sample: None,
            gamma: None,
        });
        let confusing = ranking
            .entries
            .get(&c)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::Data(format!("no confusing classes ranked for tail class {c}")))?;
        for j in 0..cfg.n_a {
            let u = confusing[j % confusing.len()].0;
            let mut made = false;
            for _ in 0..SYNTHESIS_ATTEMPTS {
                let (_, conf_i) = source.pick_class_sample(&[u], rng)?;
                let gamma = rng.gen_range(cfg.gamma_min..=cfg.gamma_max);
                let drawn = synthesize_sample(
                    source.cache.features_of(tail_i),
                    &source.specific[tail_i],
                    source.cache.features_of(conf_i),
                    &source.generic[conf_i],
                    k,
                    gamma,
                    rng,
                )?;
                if let Some(s) = drawn {
                    if s.specific_fallback || s.generic_fallback {
                        batch.fallbacks += 1;
                    }
                    batch.entries.push(BatchEntry {
                        pooled: s.pooled,
                        label: c,
                        provenance: Provenance::Augmented,
                        sample: tail_i,
                        confusing_sample: Some(conf_i),
                        gamma: Some(gamma),
                    });
                    made = true;
                    break;
                }
            }
            if !made {
                batch.skipped += 1;
                warn!("could not synthesize a sample for tail sample {tail_i}; all features are zero");
            }
        }
    }
    for _ in 0..cfg.n_t * (1 + cfg.n_a) {
        let (c, i) = source.pick_class_sample(&split.head_class_ids, rng)?;
        batch.entries.push(BatchEntry {
            pooled: source.pooled[i].clone(),
            label: c,
            provenance: Provenance::HeadReal,
            sample: i,
            confusing_sample: None,
            gamma: None,
        });
    }
    Ok(batch)
}
