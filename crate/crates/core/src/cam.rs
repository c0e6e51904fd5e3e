//! Class activation maps and their split into class-specific and
//! class-generic regions.
//!
//! The map for class `c` scores each location by the class-`c` classifier row
//! applied to that location's feature vector. After min-max normalisation a
//! location is class-specific when its score is strictly above `tau_s` and
//! class-generic when strictly below `tau_g`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{to_model_input, Dataset};
use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// `raw[x, y] = sum_k weight[k] * features[k, x, y]` for features `[K, h, w]`.
pub fn compute_cam<T: Scalar>(features: &Tensor<T>, weight_row: &[T]) -> Result<Tensor<T>> {
    if features.ndim() != 3 {
        return Err(Error::shape(
            "compute_cam",
            format!("features must be [K, h, w], got {:?}", features.shape()),
        ));
    }
    let (k, h, w) = (features.dim(0), features.dim(1), features.dim(2));
    if weight_row.len() != k {
        return Err(Error::shape(
            "compute_cam",
            format!("dimension 0: {k} feature channels but {} weights", weight_row.len()),
        ));
    }
    let l = h * w;
    let mut cam = vec![T::zero(); l];
    for (ch, &wk) in features.data().chunks_exact(l).zip(weight_row) {
        for (c, &f) in cam.iter_mut().zip(ch) {
            *c = *c + wk * f;
        }
    }
    Tensor::new(vec![h, w], cam)
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_cam<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numerical("normalize_cam", "map contains NaN"));
    }
    if !raw.is_finite() {
        return Err(Error::numerical("normalize_cam", "map contains infinities"));
    }
    let lo = raw.data().iter().copied().fold(T::infinity(), T::min);
    let hi = raw.data().iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(Tensor::zeros(raw.shape()));
    }
    Ok(raw.map(|v| ((v - lo) / range).min(T::one())))
}

fn check_threshold(name: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must lie strictly inside (0, 1), got {t}")))
    }
}

/// Binary masks `(normalized > tau_s, normalized < tau_g)` as 0/1 tensors.
pub fn decompose<T: Scalar>(normalized: &Tensor<T>, tau_s: f64, tau_g: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    check_threshold("tau_s", tau_s)?;
    check_threshold("tau_g", tau_g)?;
    let (ts, tg) = (T::of(tau_s), T::of(tau_g));
    let ind = |b: bool| if b { T::one() } else { T::zero() };
    Ok((normalized.map(|v| ind(v > ts)), normalized.map(|v| ind(v < tg))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamRecord {
    pub class_id: usize,
    /// Unnormalised map `[h, w]`.
    pub raw: Tensor<f32>,
    pub normalized: Tensor<f32>,
    pub specific_mask: Tensor<f32>,
    pub generic_mask: Tensor<f32>,
    pub tau_s: f64,
    pub tau_g: f64,
}

impl CamRecord {
    pub fn from_raw(class_id: usize, raw: Tensor<f32>, tau_s: f64, tau_g: f64) -> Result<Self> {
        let normalized = normalize_cam(&raw)?;
        let (specific_mask, generic_mask) = decompose(&normalized, tau_s, tau_g)?;
        Ok(Self {
            class_id,
            raw,
            normalized,
            specific_mask,
            generic_mask,
            tau_s,
            tau_g,
        })
    }

    pub fn specific_locations(&self) -> Vec<usize> {
        ones(&self.specific_mask)
    }

    pub fn generic_locations(&self) -> Vec<usize> {
        ones(&self.generic_mask)
    }
}

fn ones(mask: &Tensor<f32>) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Per-sample pre-pooling features, ground-truth-class CAMs and softmax
/// probabilities for a whole split, computed with one fixed checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    /// Fingerprint of the checkpoint that produced the cache.
    pub fingerprint: String,
    pub n_classes: usize,
    /// `[N, K, h, w]`
    pub features: Tensor<f32>,
    /// Raw ground-truth-class maps, `[N, h, w]`.
    pub cams: Tensor<f32>,
    /// `[N, n_classes]`
    pub probs: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    feature_file: String,
    cam_file: String,
    probs_file: String,
    class_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheIndex {
    fingerprint: String,
    n_classes: usize,
    samples: BTreeMap<String, CacheEntry>,
}

pub const CACHE_INDEX_FILE: &str = "index.json";

pub(crate) fn softmax_rows(logits: &Tensor<f32>) -> Tensor<f32> {
    let c = logits.dim(1);
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.dim(0) {
        let row = logits.row(i);
        let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Tensor::new(vec![logits.dim(0), c], out).expect("softmax keeps shape")
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_channels(&self) -> usize {
        self.features.dim(1)
    }

    /// Number of spatial locations `L = h * w`.
    pub fn locations(&self) -> usize {
        self.features.dim(2) * self.features.dim(3)
    }

    /// Sample `i`'s features as `[K, L]`, channel-major.
    pub fn features_of(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    pub fn pooled(&self, i: usize) -> Vec<f32> {
        let l = self.locations();
        self.features_of(i)
            .chunks_exact(l)
            .map(|ch| ch.iter().sum::<f32>() / l as f32)
            .collect()
    }

    pub fn record(&self, i: usize, tau_s: f64, tau_g: f64) -> Result<CamRecord> {
        let (h, w) = (self.features.dim(2), self.features.dim(3));
        let raw = Tensor::new(vec![h, w], self.cams.row(i).to_vec())?;
        CamRecord::from_raw(self.labels[i], raw, tau_s, tau_g)
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// One directory of tensor files, three per sample, plus a JSON index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = (self.features.dim(2), self.features.dim(3));
        let k = self.feature_channels();
        let mut samples = BTreeMap::new();
        for i in 0..self.len() {
            let id = format!("{i:06}");
            let entry = CacheEntry {
                feature_file: format!("{id}.features.tnsr"),
                cam_file: format!("{id}.cam.tnsr"),
                probs_file: format!("{id}.probs.tnsr"),
                class_id: self.labels[i],
            };
            Tensor::new(vec![k, h, w], self.features.row(i).to_vec())?.save(&dir.join(&entry.feature_file))?;
            Tensor::new(vec![h, w], self.cams.row(i).to_vec())?.save(&dir.join(&entry.cam_file))?;
            Tensor::new(vec![self.n_classes], self.probs.row(i).to_vec())?.save(&dir.join(&entry.probs_file))?;
            samples.insert(id, entry);
        }
        let index = CacheIndex {
            fingerprint: self.fingerprint.clone(),
            n_classes: self.n_classes,
            samples,
        };
        fs::write(dir.join(CACHE_INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(CACHE_INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::MissingArtifact {
                path: index_path,
                producer: "cache-features",
            });
        }
        let index: CacheIndex = serde_json::from_str(&fs::read_to_string(index_path)?)?;
        let n = index.samples.len();
        let mut feats = Vec::with_capacity(n);
        let mut cams = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (i, (id, entry)) in index.samples.iter().enumerate() {
            if *id != format!("{i:06}") {
                return Err(Error::Data(format!("cache index skips sample {i} (found {id})")));
            }
            feats.push(Tensor::load(&dir.join(&entry.feature_file))?);
            cams.push(Tensor::load(&dir.join(&entry.cam_file))?);
            probs.push(Tensor::load(&dir.join(&entry.probs_file))?);
            labels.push(entry.class_id);
        }
        Ok(Self {
            fingerprint: index.fingerprint,
            n_classes: index.n_classes,
            features: Tensor::stack(&feats)?,
            cams: Tensor::stack(&cams)?,
            probs: Tensor::stack(&probs)?,
            labels,
        })
    }
}

/// Run the frozen network over `dataset` and keep, for every sample, its
/// pre-pooling features, the CAM of its ground-truth class and its softmax
/// probabilities.
pub fn cache_all(params: &ModelParams<f32>, dataset: &Dataset, batch_size: usize) -> Result<FeatureCache> {
    let n_classes = params.arch.n_classes;
    if let Some(&bad) = dataset.labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Data(format!(
            "dataset label {bad} does not fit a {n_classes}-class checkpoint"
        )));
    }
    let n = dataset.len();
    let bs = batch_size.max(1);
    let mut feats = Vec::new();
    let mut cams = Vec::new();
    let mut probs = Vec::new();
    let (fh, fw) = params.arch.feature_hw();
    let k = params.arch.feature_channels();
    for start in (0..n).step_by(bs) {
        let end = (start + bs).min(n);
        let batch = to_model_input(&dataset.images.slice_rows(start, end)?);
        let out = forward(params, &batch)?;
        for (j, &y) in dataset.labels[start..end].iter().enumerate() {
            let f = Tensor::new(vec![k, fh, fw], out.features.row(j).to_vec())?;
            let cam = compute_cam(&f, params.fc.weight.row(y))?;
            cams.extend_from_slice(cam.data());
        }
        feats.extend_from_slice(out.features.data());
        probs.extend_from_slice(softmax_rows(&out.logits).data());
    }
    let features = Tensor::new(vec![n, k, fh, fw], feats)?;
    if !features.is_finite() {
        return Err(Error::numerical("cache_all", "non-finite features"));
    }
    Ok(FeatureCache {
        fingerprint: params.fingerprint(),
        n_classes,
        features,
        cams: Tensor::new(vec![n, fh, fw], cams)?,
        probs: Tensor::new(vec![n, n_classes], probs)?,
        labels: dataset.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn single_channel_identity() {
        let f = t(&[1, 2, 2], &[0.5, -1.0, 2.0, 3.0]);
        assert_eq!(compute_cam(&f, &[1.0]).unwrap().data(), f.data());
    }

    #[test]
    fn weighted_channel_sum() {
        let f = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(compute_cam(&f, &[0.5, -1.0]).unwrap().data(), &[-2.5, -3.0]);
        assert!(compute_cam(&f, &[1.0]).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_cam(&t(&[2], &[-2.5, -3.0])).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(normalize_cam(&t(&[3], &[0.0, 0.5, 1.0])).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize_cam(&t(&[3], &[7.0, 7.0, 7.0])).unwrap().data(), &[0.0; 3]);
        assert!(normalize_cam(&t(&[2], &[f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn strict_threshold_masks() {
        let (s, g) = decompose(&t(&[3], &[1.0, 0.0, 0.5]), 0.5, 0.5).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);

        let (s, g) = decompose(&t(&[3], &[0.8, 0.5, 0.2]), 0.7, 0.3).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let (s, g) = decompose(&t(&[4], &[0.0; 4]), 0.5, 0.5).unwrap();
        assert_eq!(s.data(), &[0.0; 4]);
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn thresholds_must_be_inside_unit_interval() {
        let m = t(&[1], &[0.5]);
        assert!(decompose(&m, 0.0, 0.5).is_err());
        assert!(decompose(&m, 0.5, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn cam_is_linear_in_the_classifier_row(
            f in prop::collection::vec(-2.0f64..2.0, 12),
            w1 in prop::collection::vec(-1.0f64..1.0, 3),
            w2 in prop::collection::vec(-1.0f64..1.0, 3),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let f = t(&[3, 2, 2], &f);
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let lhs = compute_cam(&f, &mix).unwrap();
            let c1 = compute_cam(&f, &w1).unwrap();
            let c2 = compute_cam(&f, &w2).unwrap();
            for i in 0..4 {
                prop_assert!((lhs.data()[i] - (a * c1.data()[i] + b * c2.data()[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn normalized_range_and_argmax(v in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let raw = t(&[v.len()], &v);
            let n = normalize_cam(&raw).unwrap();
            prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
            let argmax = |d: &[f64]| d.iter().enumerate().fold(0, |best, (i, &x)| if x > d[best] { i } else { best });
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                prop_assert_eq!(argmax(raw.data()), argmax(n.data()));
            }
        }
    }
}
