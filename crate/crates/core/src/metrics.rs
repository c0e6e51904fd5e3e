//! Accuracy bookkeeping, confusion matrices and PCA projections of pooled
//! features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cam::FeatureCache;
use crate::error::{Error, Result};

/// Classes with more training samples than this are "many-shot".
pub const MANY_ABOVE: usize = 100;
/// Classes with at most this many training samples are "few-shot"; the rest
/// are "medium-shot".
pub const FEW_AT_MOST: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub fn of(train_count: usize) -> Self {
        if train_count > MANY_ABOVE {
            Group::Many
        } else if train_count > FEW_AT_MOST {
            Group::Medium
        } else {
            Group::Few
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Macro accuracy of each training-count group; `None` when no class of the
/// group has test samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    /// `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub groups: GroupAccuracy,
    pub train_counts: Vec<usize>,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], train_counts: &[usize]) -> Result<Self> {
        let n = train_counts.len();
        if predicted.len() != labels.len() {
            return Err(Error::shape(
                "metrics",
                format!("{} predictions for {} labels", predicted.len(), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty test split".into()));
        }
        let mut confusion = vec![vec![0u64; n]; n];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= n || y >= n {
                return Err(Error::Data(format!("class id {} outside {n} classes", p.max(y))));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion, train_counts.to_vec())
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, train_counts: Vec<usize>) -> Result<Self> {
        let n = train_counts.len();
        if confusion.len() != n || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::shape("metrics", format!("confusion matrix is not {n}x{n}")));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Data("confusion matrix is empty".into()));
        }
        let correct: u64 = (0..n).map(|c| confusion[c][c]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let t: u64 = row.iter().sum();
                (t > 0).then(|| row[c] as f64 / t as f64)
            })
            .collect();
        let mut m = Self {
            overall: correct as f64 / total as f64,
            per_class,
            confusion,
            groups: GroupAccuracy {
                many: None,
                medium: None,
                few: None,
            },
            train_counts,
        };
        m.groups = GroupAccuracy {
            many: m.group_accuracy(&[Group::Many]),
            medium: m.group_accuracy(&[Group::Medium]),
            few: m.group_accuracy(&[Group::Few]),
        };
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.train_counts.len()
    }

    pub fn test_counts(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn group_of(&self, class: usize) -> Group {
        Group::of(self.train_counts[class])
    }

    /// Unweighted mean accuracy over the given classes that have test samples.
    pub fn macro_accuracy(&self, classes: impl IntoIterator<Item = usize>) -> Option<f64> {
        let accs: Vec<f64> = classes.into_iter().filter_map(|c| self.per_class[c]).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn group_accuracy(&self, groups: &[Group]) -> Option<f64> {
        self.macro_accuracy((0..self.n_classes()).filter(|&c| groups.contains(&self.group_of(c))))
    }

    /// Macro accuracy over the medium- and few-shot classes.
    pub fn tail_accuracy(&self) -> Option<f64> {
        self.group_accuracy(&[Group::Medium, Group::Few])
    }
}

/// Elementwise `after - before`.
pub fn diff_confusion(before: &Metrics, after: &Metrics) -> Result<Vec<Vec<i64>>> {
    if before.n_classes() != after.n_classes() {
        return Err(Error::shape(
            "diff_confusion",
            format!("{} vs {} classes", before.n_classes(), after.n_classes()),
        ));
    }
    if before.test_counts() != after.test_counts() {
        return Err(Error::Data("diff_confusion needs identical test counts".into()));
    }
    Ok(before
        .confusion
        .iter()
        .zip(&after.confusion)
        .map(|(b, a)| a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Specific,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub kind: FeatureKind,
    /// The mask support was empty and the point is a zero vector.
    pub empty_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterExport {
    pub points: Vec<ScatterPoint>,
    /// Two orthonormal `K`-vectors.
    pub basis: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// All covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// The data has no variance; every point sits at the origin.
    pub degenerate: bool,
}

/// One pooled vector to be projected.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterInput {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub kind: FeatureKind,
    pub empty_support: bool,
}

/// Project onto the top two principal components (population covariance).
/// Each basis vector's largest-magnitude entry is made positive.
pub fn pca_scatter(inputs: &[ScatterInput]) -> Result<ScatterExport> {
    if inputs.len() < 2 {
        return Err(Error::invalid("points", "PCA needs at least two points"));
    }
    let k = inputs[0].vector.len();
    if k < 2 {
        return Err(Error::invalid("points", "PCA needs at least two dimensions"));
    }
    if inputs.iter().any(|p| p.vector.len() != k) {
        return Err(Error::shape("pca_scatter", "points differ in dimension"));
    }
    if inputs.iter().any(|p| p.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical("pca_scatter", "non-finite feature value"));
    }
    let n = inputs.len() as f64;
    let mut mean = vec![0.0; k];
    for p in inputs {
        for (m, v) in mean.iter_mut().zip(&p.vector) {
            *m += v / n;
        }
    }
    let centered = DMatrix::from_fn(inputs.len(), k, |i, j| inputs[i].vector[j] - mean[j]);
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let degenerate = total <= 1e-12 * (1.0 + mean.iter().map(|m| m * m).sum::<f64>());

    let basis: [Vec<f64>; 2] = if degenerate {
        let axis = |a: usize| (0..k).map(|j| if j == a { 1.0 } else { 0.0 }).collect();
        [axis(0), axis(1)]
    } else {
        [0, 1].map(|r| {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[r]).iter().copied().collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let s = pivot.signum() / norm;
            v.iter_mut().for_each(|x| *x *= s);
            v
        })
    };
    let points = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = centered.row(i);
            let proj = |b: &[f64]| if degenerate { 0.0 } else { row.iter().zip(b).map(|(x, y)| x * y).sum() };
            ScatterPoint {
                x: proj(&basis[0]),
                y: proj(&basis[1]),
                class_id: p.class_id,
                kind: p.kind,
                empty_support: p.empty_support,
            }
        })
        .collect();
    Ok(ScatterExport {
        points,
        basis,
        mean,
        eigenvalues,
        degenerate,
    })
}

/// Per-sample masked means of pre-pooling features over the class-specific
/// and class-generic regions, for the samples selected by `keep`.
pub fn masked_means(
    cache: &FeatureCache,
    tau_s: f64,
    tau_g: f64,
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<ScatterInput>> {
    let k = cache.feature_channels();
    let l = cache.locations();
    let mut out = Vec::new();
    for i in (0..cache.len()).filter(|&i| keep(i)) {
        let rec = cache.record(i, tau_s, tau_g)?;
        let f = cache.features_of(i);
        for (kind, locs) in [
            (FeatureKind::Specific, rec.specific_locations()),
            (FeatureKind::Generic, rec.generic_locations()),
        ] {
            let vector = (0..k)
                .map(|ch| {
                    if locs.is_empty() {
                        0.0
                    } else {
                        locs.iter().map(|&loc| f[ch * l + loc] as f64).sum::<f64>() / locs.len() as f64
                    }
                })
                .collect();
            out.push(ScatterInput {
                vector,
                class_id: cache.labels[i],
                kind,
                empty_support: locs.is_empty(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts() -> Vec<usize> {
        vec![500, 50, 10]
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = [0, 0, 1, 1, 1, 2];
        let m = Metrics::from_predictions(&labels, &labels, &counts()).unwrap();
        assert_eq!(m.overall, 1.0);
        assert_eq!(m.test_counts(), vec![2, 3, 1]);
        for c in 0..3 {
            assert_eq!(m.confusion[c][c], m.test_counts()[c]);
        }
        let m = Metrics::from_predictions(&[0; 6], &labels, &counts()).unwrap();
        assert_eq!(m.overall, 2.0 / 6.0);
        assert_eq!(m.groups.many, Some(1.0));
        assert_eq!(m.groups.medium, Some(0.0));
    }

    #[test]
    fn groups_by_training_count() {
        assert_eq!(Group::of(101), Group::Many);
        assert_eq!(Group::of(100), Group::Medium);
        assert_eq!(Group::of(21), Group::Medium);
        assert_eq!(Group::of(20), Group::Few);
        let m = Metrics::from_predictions(&[0, 1], &[0, 1], &[500, 50, 10]).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.groups.few, None);
    }

    #[test]
    fn diff_of_identical_is_zero() {
        let m = Metrics::from_predictions(&[0, 1, 1], &[0, 1, 2], &counts()).unwrap();
        assert!(diff_confusion(&m, &m).unwrap().iter().flatten().all(|&v| v == 0));
        let other = Metrics::from_predictions(&[0, 1], &[0, 1], &counts()).unwrap();
        assert!(diff_confusion(&m, &other).is_err());
    }

    fn input(v: Vec<f64>) -> ScatterInput {
        ScatterInput {
            vector: v,
            class_id: 0,
            kind: FeatureKind::Generic,
            empty_support: false,
        }
    }

    #[test]
    fn axis_aligned_variance() {
        // variances 4 and 1 along x and y
        let pts = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let inputs: Vec<_> = pts
            .iter()
            .flat_map(|p| [input(vec![p[0], p[1]]), input(vec![p[0], p[1]])])
            .collect();
        let s = pca_scatter(&inputs).unwrap();
        assert!((s.basis[0][0].abs() - 1.0).abs() < 1e-9 && s.basis[0][1].abs() < 1e-9);
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-9 && (s.eigenvalues[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn repeated_point_is_degenerate() {
        let s = pca_scatter(&[input(vec![1.0, 2.0, 3.0]), input(vec![1.0, 2.0, 3.0])]).unwrap();
        assert!(s.degenerate);
        assert!(s.points.iter().all(|p| p.x == 0.0 && p.y == 0.0));
        assert!(pca_scatter(&[input(vec![1.0, 2.0])]).is_err());
    }

    proptest! {
        #[test]
        fn confusion_invariants(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (pred, lab): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = Metrics::from_predictions(&pred, &lab, &[200, 60, 20, 5]).unwrap();
            let tc = m.test_counts();
            let weighted: f64 = m.per_class.iter().zip(&tc)
                .filter_map(|(a, &t)| a.map(|a| a * t as f64)).sum::<f64>() / lab.len() as f64;
            prop_assert!((weighted - m.overall).abs() < 1e-12);
            for c in 0..4 {
                prop_assert_eq!(tc[c], lab.iter().filter(|&&y| y == c).count() as u64);
            }
            let shifted: Vec<usize> = pred.iter().map(|p| (p + 1) % 4).collect();
            let m2 = Metrics::from_predictions(&shifted, &lab, &[200, 60, 20, 5]).unwrap();
            for row in diff_confusion(&m, &m2).unwrap() {
                prop_assert_eq!(row.iter().sum::<i64>(), 0);
            }
        }
    }
}
