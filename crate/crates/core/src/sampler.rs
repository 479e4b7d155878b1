//! Active-batch selection and unlabeled-pool partitioning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::datapool::{DataPool, Sample, SampleId};
use crate::error::{Error, Result};
use crate::gmm::{component_posterior, GmmParams};
use crate::scoring::{CentroidSet, Category, SimilarityIndex, PROB_FLOOR};

/// An unlabeled sample id with its informativeness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: SampleId,
    pub score: f64,
}

/// The `b` ids with the largest keys, in descending key order. Equal keys
/// favor the smaller id.
pub fn top_b_descending(keyed: &[(SampleId, f64)], b: usize) -> Vec<SampleId> {
    let mut order: Vec<&(SampleId, f64)> = keyed.iter().collect();
    order.sort_by(|a, c| c.1.total_cmp(&a.1).then(a.0.cmp(&c.0)));
    order.into_iter().take(b).map(|(id, _)| *id).collect()
}

/// The `b` ids with the smallest keys, ascending. Equal keys favor the
/// smaller id.
pub fn top_b_ascending(keyed: &[(SampleId, f64)], b: usize) -> Vec<SampleId> {
    let mut order: Vec<&(SampleId, f64)> = keyed.iter().collect();
    order.sort_by(|a, c| a.1.total_cmp(&c.1).then(a.0.cmp(&c.0)));
    order.into_iter().take(b).map(|(id, _)| *id).collect()
}

/// Posterior probability of the uncertain-inconsistent component for each
/// candidate.
pub fn ui_posteriors(candidates: &[ScoredSample], params: &GmmParams) -> Vec<(SampleId, f64)> {
    let ui = Category::UncertainInconsistent.index();
    candidates
        .iter()
        .map(|c| (c.id, component_posterior(c.score, params)[ui]))
        .collect()
}

/// Ranks every candidate by its uncertain-inconsistent posterior and keeps
/// the top `b`.
pub fn select_active_batch(candidates: &[ScoredSample], params: &GmmParams, b: usize) -> Vec<SampleId> {
    top_b_descending(&ui_posteriors(candidates, params), b)
}

/// Per-category counts of a partition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub cc: usize,
    pub uc: usize,
    /// Samples whose argmax is UI but which were not annotated this round.
    pub ui_residual: usize,
    pub ci: usize,
    /// Samples not partitioned at all (baseline strategies).
    pub unassigned: usize,
}

impl PartitionSizes {
    pub fn total(&self) -> usize {
        self.cc + self.uc + self.ui_residual + self.ci + self.unassigned
    }
}

/// Category of every remaining unlabeled sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    assignments: BTreeMap<SampleId, Category>,
}

impl Partition {
    pub fn category(&self, id: SampleId) -> Option<Category> {
        self.assignments.get(&id).copied()
    }

    pub fn ids(&self, category: Category) -> Vec<SampleId> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == category)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SampleId, Category)> + '_ {
        self.assignments.iter().map(|(&id, &c)| (id, c))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn sizes(&self) -> PartitionSizes {
        let mut sizes = PartitionSizes::default();
        for c in self.assignments.values() {
            match c {
                Category::ConfidentConsistent => sizes.cc += 1,
                Category::UncertainConsistent => sizes.uc += 1,
                Category::UncertainInconsistent => sizes.ui_residual += 1,
                Category::ConfidentInconsistent => sizes.ci += 1,
            }
        }
        sizes
    }
}

/// Assigns each remaining sample to the argmax of its four-component
/// posterior (smallest component index on ties).
pub fn partition_unlabeled(remaining: &[ScoredSample], params: &GmmParams) -> Partition {
    let assignments = remaining
        .iter()
        .map(|c| {
            let post = component_posterior(c.score, params);
            let k = crate::math::argmax(&post);
            (c.id, Category::from_index(k).expect("four components"))
        })
        .collect();
    Partition { assignments }
}

/// Threshold schedule for the source-free bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfdaConfig {
    pub t_v_init: f64,
    pub t_v_step: f64,
    /// Defaults to `1/C + 1e-5` when absent.
    pub t_c_init: Option<f64>,
    pub t_c_step: f64,
}

impl Default for SfdaConfig {
    fn default() -> Self {
        Self {
            t_v_init: 0.95,
            t_v_step: 0.1,
            t_c_init: None,
            t_c_step: 0.1,
        }
    }
}

impl SfdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_v_step > 0.0 && self.t_c_step > 0.0) {
            return Err(Error::InvalidConfig("SFDA threshold steps must be positive".into()));
        }
        Ok(())
    }

    pub fn t_c_start(&self, n_classes: usize) -> f64 {
        self.t_c_init.unwrap_or(1.0 / n_classes as f64 + 1e-5)
    }
}

/// Result of [`sfda_bootstrap`].
#[derive(Debug, Clone)]
pub struct SfdaOutcome {
    /// Confident `(id, predicted class)` pairs standing in for labeled data.
    pub pseudo_labeled: Vec<(SampleId, usize)>,
    /// Final confidence threshold for the pseudo-labeled set.
    pub t_v: f64,
    pub t_v_relaxations: usize,
    pub centroids: CentroidSet,
    /// Final uncertainty threshold for the inconsistent-uncertain set.
    pub t_c: f64,
    pub t_c_raises: usize,
    /// Inconsistent samples with max probability at most `t_c`.
    pub inconsistent_uncertain: Vec<SampleId>,
    /// The ids to annotate: the whole inconsistent-uncertain set when it has
    /// at most `b` members, else the `b` least confident.
    pub active: Vec<SampleId>,
}

struct Prediction {
    id: SampleId,
    feature: Vec<f64>,
    predicted: usize,
    max_prob: f64,
}

/// Source-free bootstrap: confident target predictions stand in for labeled
/// data (relaxing `t_v` until every class is covered), and the active batch
/// is drawn from samples whose prediction disagrees with their similarity
/// label and whose confidence is at most `t_c` (raised until `b` qualify).
pub fn sfda_bootstrap(
    model: &Classifier,
    unlabeled: &[&Sample],
    cfg: &SfdaConfig,
    k: usize,
    b: usize,
) -> Result<SfdaOutcome> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::EmptyBatch("sfda_bootstrap"));
    }
    let n_classes = model.n_classes();
    let preds = unlabeled
        .iter()
        .map(|s| {
            let fwd = model.forward(&s.x)?;
            Ok(Prediction {
                id: s.id,
                predicted: fwd.probs.argmax(),
                max_prob: fwd.probs.max(),
                feature: fwd.feature,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut relaxations = 0;
    let (t_v, chosen) = loop {
        let t_v = cfg.t_v_init - relaxations as f64 * cfg.t_v_step;
        if t_v < 0.0 {
            return Err(Error::CoverageFailure(n_classes));
        }
        let chosen: Vec<&Prediction> = preds.iter().filter(|p| p.max_prob >= t_v).collect();
        let mut covered = vec![false; n_classes];
        chosen.iter().for_each(|p| covered[p.predicted] = true);
        if covered.iter().all(|&c| c) {
            break (t_v, chosen);
        }
        relaxations += 1;
    };
    let centroids =
        CentroidSet::from_features(n_classes, chosen.iter().map(|p| (&p.feature[..], p.predicted)))?;
    let index = SimilarityIndex::new(&centroids, k)?;
    let inconsistent: Vec<&Prediction> = preds
        .iter()
        .map(|p| Ok((p, index.label(&p.feature)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(p, sim)| p.predicted != *sim)
        .map(|(p, _)| p)
        .collect();

    let t_c_start = cfg.t_c_start(n_classes);
    let mut raises = 0;
    let (t_c, qualifying) = loop {
        let t_c = t_c_start + raises as f64 * cfg.t_c_step;
        let qualifying: Vec<&Prediction> =
            inconsistent.iter().copied().filter(|p| p.max_prob <= t_c).collect();
        if qualifying.len() >= b || t_c >= 1.0 {
            break (t_c, qualifying);
        }
        raises += 1;
    };
    let keyed: Vec<(SampleId, f64)> = qualifying.iter().map(|p| (p.id, p.max_prob)).collect();
    let active = top_b_ascending(&keyed, b);
    let mut inconsistent_uncertain: Vec<SampleId> = qualifying.iter().map(|p| p.id).collect();
    inconsistent_uncertain.sort_unstable();

    Ok(SfdaOutcome {
        pseudo_labeled: chosen.iter().map(|p| (p.id, p.predicted)).collect(),
        t_v,
        t_v_relaxations: relaxations,
        centroids,
        t_c,
        t_c_raises: raises,
        inconsistent_uncertain,
        active,
    })
}

/// Fraction of `xs` whose predicted class equals its similarity label.
pub fn consistency_rate(model: &Classifier, index: &SimilarityIndex, xs: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch("consistency_rate"));
    }
    let mut consistent = 0usize;
    for x in xs {
        let fwd = model.forward(x)?;
        if fwd.probs.argmax() == index.label(&fwd.feature)? {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / xs.len() as f64)
}

/// Nearest-rank quantile point: the `ceil(q n)`-th smallest value.
pub fn quantile_point(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Consistency rates of the well-learnt (`loss <= quantile`) and underfitted
/// (`loss > quantile`) parts of the unlabeled pool, where the loss is the
/// cross-entropy at the true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySplit {
    pub k: usize,
    pub quantile: f64,
    pub n_well_learnt: usize,
    pub n_underfitted: usize,
    pub rate_well_learnt: Option<f64>,
    pub rate_underfitted: Option<f64>,
}

pub fn consistency_diagnostic(
    model: &Classifier,
    pool: &DataPool,
    centroids: &CentroidSet,
    k: usize,
    quantiles: &[f64],
) -> Result<Vec<ConsistencySplit>> {
    let index = SimilarityIndex::new(centroids, k)?;
    let truth: Vec<(&Sample, usize)> = pool
        .target_unlabeled()
        .map(|s| (s, pool.hidden_label(s.id).expect("pool sample")))
        .collect();
    if truth.is_empty() {
        return Err(Error::EmptyBatch("consistency_diagnostic"));
    }
    let losses = truth
        .iter()
        .map(|(s, y)| Ok(-model.predict_proba(&s.x)?.get(*y).max(PROB_FLOOR).ln()))
        .collect::<Result<Vec<f64>>>()?;
    quantiles
        .iter()
        .map(|&q| {
            let cut = quantile_point(&losses, q);
            let mut plus: Vec<&[f64]> = Vec::new();
            let mut minus: Vec<&[f64]> = Vec::new();
            for ((s, _), &l) in truth.iter().zip(&losses) {
                if l <= cut {
                    plus.push(&s.x);
                } else {
                    minus.push(&s.x);
                }
            }
            let rate = |v: &[&[f64]]| -> Result<Option<f64>> {
                if v.is_empty() {
                    Ok(None)
                } else {
                    consistency_rate(model, &index, v).map(Some)
                }
            };
            Ok(ConsistencySplit {
                k,
                quantile: q,
                n_well_learnt: plus.len(),
                n_underfitted: minus.len(),
                rate_well_learnt: rate(&plus)?,
                rate_underfitted: rate(&minus)?,
            })
        })
        .collect()
}
