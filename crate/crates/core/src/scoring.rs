//! Informativeness scoring.
//!
//! Every labeled sample is scored by its cross-entropy at the true label.
//! Every unlabeled sample is scored at its *similarity label*: the class
//! whose centroid shares the most top-k feature indices (by magnitude) with
//! the sample's own feature vector, measured by intersection-over-union.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ProbVec};
use crate::datapool::SampleId;
use crate::error::{Error, Result};

/// Probabilities are clamped to this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// The four target-data categories, in mixture-component order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Confident and consistent (component 1).
    #[serde(rename = "CC")]
    ConfidentConsistent,
    /// Uncertain and consistent (component 2).
    #[serde(rename = "UC")]
    UncertainConsistent,
    /// Uncertain and inconsistent (component 3).
    #[serde(rename = "UI")]
    UncertainInconsistent,
    /// Confident and inconsistent (component 4).
    #[serde(rename = "CI")]
    ConfidentInconsistent,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ConfidentConsistent,
        Category::UncertainConsistent,
        Category::UncertainInconsistent,
        Category::ConfidentInconsistent,
    ];

    /// Zero-based mixture component index.
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based component number (1..=4).
    pub fn component(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Category::ConfidentConsistent => "CC",
            Category::UncertainConsistent => "UC",
            Category::UncertainInconsistent => "UI",
            Category::ConfidentInconsistent => "CI",
        }
    }

    /// Observation label of a labeled sample: confident when the top
    /// probability reaches `tau` (inclusive), consistent when the prediction
    /// equals `label`.
    pub fn observe(probs: &ProbVec, label: usize, tau: f64) -> Self {
        let confident = probs.max() >= tau;
        let consistent = probs.argmax() == label;
        match (confident, consistent) {
            (true, true) => Category::ConfidentConsistent,
            (false, true) => Category::UncertainConsistent,
            (false, false) => Category::UncertainInconsistent,
            (true, false) => Category::ConfidentInconsistent,
        }
    }
}

/// Per-class mean feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    centroids: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl CentroidSet {
    /// Averages `(feature, class)` pairs per class. Every class in
    /// `0..n_classes` must be present.
    pub fn from_features<F: AsRef<[f64]>>(
        n_classes: usize,
        items: impl IntoIterator<Item = (F, usize)>,
    ) -> Result<Self> {
        let mut sums: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
        let mut counts = vec![0usize; n_classes];
        let mut dim = None;
        for (feature, class) in items {
            let feature = feature.as_ref();
            if class >= n_classes {
                return Err(Error::ClassOutOfRange { class, n_classes });
            }
            let d = *dim.get_or_insert(feature.len());
            if feature.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: feature.len(),
                });
            }
            if sums[class].is_empty() {
                sums[class] = vec![0.0; d];
            }
            for (s, v) in sums[class].iter_mut().zip(feature) {
                *s += v;
            }
            counts[class] += 1;
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass(missing));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        Ok(Self { centroids, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        &self.centroids[class]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Centroids of the model features of labeled `(x, y)` pairs.
pub fn compute_centroids<'a>(
    model: &Classifier,
    labeled: impl IntoIterator<Item = (&'a [f64], usize)>,
) -> Result<CentroidSet> {
    let features = labeled
        .into_iter()
        .map(|(x, y)| Ok((model.features(x)?, y)))
        .collect::<Result<Vec<_>>>()?;
    CentroidSet::from_features(model.n_classes(), features)
}

/// Indices of the `k` largest-magnitude entries, returned in ascending index
/// order. Equal magnitudes favor the smaller index.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::TopKTooLarge { k, dim: v.len() });
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Intersection-over-union of two ascending index sets.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Precomputed top-k index sets of every centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    k: usize,
    dim: usize,
    centroid_topk: Vec<Vec<usize>>,
}

impl SimilarityIndex {
    pub fn new(centroids: &CentroidSet, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        let dim = centroids.centroid(0).len();
        let centroid_topk = centroids
            .centroids
            .iter()
            .map(|c| topk_indices(c, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            k,
            dim,
            centroid_topk,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_classes(&self) -> usize {
        self.centroid_topk.len()
    }

    /// IoU of the feature's top-k set with every centroid's.
    pub fn ious(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: feature.len(),
            });
        }
        let own = topk_indices(feature, self.k)?;
        Ok(self.centroid_topk.iter().map(|c| iou(&own, c)).collect())
    }

    /// Class with the highest IoU; the smallest class index wins ties.
    pub fn label(&self, feature: &[f64]) -> Result<usize> {
        Ok(crate::math::argmax(&self.ious(feature)?))
    }
}

pub fn similarity_label(feature: &[f64], centroids: &CentroidSet, k: usize) -> Result<usize> {
    SimilarityIndex::new(centroids, k)?.label(feature)
}

/// A cross-entropy informativeness value in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InfoScore(pub f64);

impl InfoScore {
    /// `-ln max(P_label, PROB_FLOOR)`.
    pub fn at(probs: &ProbVec, label: usize) -> Self {
        InfoScore(-probs.get(label).max(PROB_FLOOR).ln())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Everything computed for one unlabeled sample during scoring.
#[derive(Debug, Clone)]
pub struct UnlabeledScore {
    pub score: InfoScore,
    pub sim_label: usize,
    pub probs: ProbVec,
}

impl UnlabeledScore {
    pub fn predicted(&self) -> usize {
        self.probs.argmax()
    }

    pub fn is_consistent(&self) -> bool {
        self.predicted() == self.sim_label
    }
}

pub fn score_unlabeled(
    model: &Classifier,
    index: &SimilarityIndex,
    x: &[f64],
) -> Result<UnlabeledScore> {
    let fwd = model.forward(x)?;
    let sim_label = index.label(&fwd.feature)?;
    Ok(UnlabeledScore {
        score: InfoScore::at(&fwd.probs, sim_label),
        sim_label,
        probs: fwd.probs,
    })
}

/// Cross-entropy of the model at the similarity label of `x`.
pub fn info_score_unlabeled(
    model: &Classifier,
    index: &SimilarityIndex,
    x: &[f64],
) -> Result<InfoScore> {
    Ok(score_unlabeled(model, index, x)?.score)
}

/// Cross-entropy of the model at the ground-truth label `y`.
pub fn info_score_labeled(model: &Classifier, x: &[f64], y: usize) -> Result<InfoScore> {
    if y >= model.n_classes() {
        return Err(Error::ClassOutOfRange {
            class: y,
            n_classes: model.n_classes(),
        });
    }
    Ok(InfoScore::at(&model.predict_proba(x)?, y))
}

pub fn observation_label(model: &Classifier, x: &[f64], y: usize, tau: f64) -> Result<Category> {
    if y >= model.n_classes() {
        return Err(Error::ClassOutOfRange {
            class: y,
            n_classes: model.n_classes(),
        });
    }
    Ok(Category::observe(&model.predict_proba(x)?, y, tau))
}

/// One row of the score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: SampleId,
    pub info_score: f64,
    pub sim_label: usize,
    pub pred_label: usize,
    pub max_prob: f64,
    /// Observation label for labeled samples, partition category for
    /// unlabeled ones.
    pub obs_or_component: Category,
}

pub fn write_score_csv(records: &[ScoreRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<score csv>", e))?;
    Ok(())
}
