//! The active adaptation loop, selection baselines and evaluation.
//!
//! Each round runs, in order: centroids over the labeled set, scores for
//! labeled and unlabeled samples, mixture fit, selection, annotation,
//! partition of the remaining pool, and training on the combined loss.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, TrainBatch, TrainConfig, TrainSummary};
use crate::datapool::{generate_shifted_dataset, DataPool, SampleId, ShiftConfig};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, GmmReport, GmmTrainSet};
use crate::math::{rng_from_seed, Rng};
use crate::sampler::{
    consistency_diagnostic, partition_unlabeled, sfda_bootstrap, top_b_ascending,
    top_b_descending, ui_posteriors, ConsistencySplit, Partition, PartitionSizes, ScoredSample,
    SfdaConfig,
};
use crate::scoring::{compute_centroids, score_unlabeled, Category, InfoScore, SimilarityIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Mixture-based selection with per-subset training losses.
    Diana,
    Random,
    /// Highest prediction entropy.
    Entropy,
    /// Lowest top-class probability.
    LeastConfidence,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Diana => "diana",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::LeastConfidence => "least_confidence",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diana" => Ok(Strategy::Diana),
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "least_confidence" | "leastconfidence" | "lc" | "conf" => Ok(Strategy::LeastConfidence),
            other => Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Total annotation budget `B`.
    pub budget: usize,
    /// Number of selection rounds `R`; must divide the budget.
    pub rounds: usize,
    /// Confidence threshold for observation labels.
    pub tau: f64,
    /// Top-k size for similarity labels.
    pub k: usize,
    /// Hidden feature width of the classifier.
    pub d_feat: usize,
    pub train: TrainConfig,
    pub strategy: Strategy,
    /// Source-free mode: after pretraining, source data is never used again.
    pub sfda: Option<SfdaConfig>,
    /// Overrides the labeled-group weight of the mixture fit.
    pub alpha: Option<f64>,
    /// Seed of the random-selection baseline.
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        let d_feat = 64;
        Self {
            budget: 100,
            rounds: 5,
            tau: 0.95,
            k: d_feat / 8,
            d_feat,
            train: TrainConfig::default(),
            strategy: Strategy::Diana,
            sfda: None,
            alpha: None,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.budget > 0 {
            if self.rounds == 0 {
                return bad("rounds must be positive when the budget is".into());
            }
            if !self.budget.is_multiple_of(self.rounds) {
                return bad(format!(
                    "rounds ({}) must divide the budget ({})",
                    self.rounds, self.budget
                ));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if self.k == 0 || self.k > self.d_feat {
            return bad(format!("k = {} must lie in 1..={}", self.k, self.d_feat));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
        }
        if let Some(sfda) = &self.sfda {
            sfda.validate()?;
        }
        self.train.validate()
    }

    /// Annotations per round, `B / R`.
    pub fn per_round(&self) -> usize {
        if self.budget == 0 {
            0
        } else {
            self.budget / self.rounds
        }
    }

    fn effective_rounds(&self) -> usize {
        if self.budget == 0 {
            0
        } else {
            self.rounds
        }
    }
}

/// Thresholds reached by the source-free bootstrap in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfdaTrace {
    pub t_v: f64,
    pub t_c: f64,
    pub pseudo_labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// One-based round index.
    pub round: usize,
    /// Accuracy over the full target set after this round's training.
    pub accuracy: f64,
    pub annotated_total: usize,
    pub selected: Vec<SampleId>,
    /// Selection key of each selected sample: the UI posterior for the
    /// mixture strategy, entropy / max probability for baselines, 0 for
    /// random.
    pub selected_scores: Vec<f64>,
    /// Fraction of selected samples the pre-training model misclassified.
    pub selected_error_rate: f64,
    pub partition: PartitionSizes,
    pub gmm: Option<GmmReport>,
    pub sfda: Option<SfdaTrace>,
    pub train: TrainSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub strategy: Strategy,
    /// Target accuracy of the source-pretrained model.
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundReport>,
    pub model: Classifier,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds
            .last()
            .map_or(self.initial_accuracy, |r| r.accuracy)
    }
}

/// Fraction of all target samples (labeled and unlabeled) predicted
/// correctly.
pub fn evaluate(model: &Classifier, pool: &DataPool) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (sample, label) in pool.target_ground_truth() {
        total += 1;
        if model.predict(&sample.x)? == label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch("evaluate"));
    }
    Ok(correct as f64 / total as f64)
}

/// Supervised training on the labeled source pool for
/// `cfg.pretrain_epochs` epochs.
pub fn pretrain_source(
    model: &mut Classifier,
    pool: &DataPool,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    if cfg.pretrain_epochs == 0 {
        return Ok(TrainSummary::default());
    }
    let data = TrainBatch {
        labeled: pool.source_labeled().map(|(s, y)| (s.x.as_slice(), y)).collect(),
        ..TrainBatch::default()
    };
    model.train(&data, cfg, cfg.pretrain_epochs, rng)
}

/// Fresh model for `cfg`, pretrained on the source pool.
pub fn pretrained_model(cfg: &LoopConfig, pool: &DataPool, rng: &mut Rng) -> Result<Classifier> {
    let mut model = Classifier::new(pool.d_in(), cfg.d_feat, pool.n_classes(), rng)?;
    pretrain_source(&mut model, pool, &cfg.train, rng)?;
    Ok(model)
}

struct Selection {
    ids: Vec<SampleId>,
    scores: Vec<f64>,
    partition: Option<Partition>,
    /// Similarity label of every scored unlabeled sample.
    sim_labels: Vec<(SampleId, usize)>,
    gmm: Option<GmmReport>,
    sfda: Option<SfdaTrace>,
}

fn labeled_set(pool: &DataPool, source_free: bool) -> Vec<(&[f64], usize)> {
    if source_free {
        pool.target_labeled().map(|(s, y)| (s.x.as_slice(), y)).collect()
    } else {
        pool.labeled().map(|(s, y)| (s.x.as_slice(), y)).collect()
    }
}

fn covers_all_classes(labeled: &[(&[f64], usize)], n_classes: usize) -> bool {
    let mut seen = vec![false; n_classes];
    labeled.iter().for_each(|&(_, y)| seen[y] = true);
    seen.into_iter().all(|s| s)
}

fn select_mixture(cfg: &LoopConfig, model: &Classifier, pool: &DataPool, b: usize) -> Result<Selection> {
    let source_free = cfg.sfda.is_some();
    let labeled = labeled_set(pool, source_free);
    if let Some(sfda) = cfg.sfda.as_ref().filter(|_| !covers_all_classes(&labeled, pool.n_classes())) {
        return select_bootstrap(sfda, cfg, model, pool, b);
    }

    let centroids = compute_centroids(model, labeled.iter().copied())?;
    let index = SimilarityIndex::new(&centroids, cfg.k)?;
    let d_l = labeled
        .iter()
        .map(|&(x, y)| {
            let probs = model.predict_proba(x)?;
            Ok((InfoScore::at(&probs, y).value(), Category::observe(&probs, y, cfg.tau)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut candidates = Vec::with_capacity(pool.n_target_unlabeled());
    let mut sim_labels = Vec::with_capacity(pool.n_target_unlabeled());
    for s in pool.target_unlabeled() {
        let u = score_unlabeled(model, &index, &s.x)?;
        candidates.push(ScoredSample {
            id: s.id,
            score: u.score.value(),
        });
        sim_labels.push((s.id, u.sim_label));
    }
    let d_u: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    let train_set = match cfg.alpha {
        Some(a) => GmmTrainSet::with_alpha(d_l, d_u, a)?,
        None => GmmTrainSet::new(d_l, d_u)?,
    };
    let fit = fit_gmm(&train_set)?;

    let keyed = ui_posteriors(&candidates, &fit.params);
    let ids = top_b_descending(&keyed, b);
    let chosen: HashSet<SampleId> = ids.iter().copied().collect();
    let scores = ids
        .iter()
        .map(|id| keyed.iter().find(|(k, _)| k == id).map(|(_, p)| *p).unwrap_or(f64::NAN))
        .collect();
    let remaining: Vec<ScoredSample> = candidates
        .into_iter()
        .filter(|c| !chosen.contains(&c.id))
        .collect();
    let partition = partition_unlabeled(&remaining, &fit.params);
    Ok(Selection {
        ids,
        scores,
        partition: Some(partition),
        sim_labels,
        gmm: Some(fit.report()),
        sfda: None,
    })
}

/// Source-free round before the labeled target set covers every class. The
/// bootstrap batch is topped up with the least confident remaining samples
/// when fewer than `b` inconsistent samples exist, so the budget is spent
/// exactly.
fn select_bootstrap(
    sfda: &SfdaConfig,
    cfg: &LoopConfig,
    model: &Classifier,
    pool: &DataPool,
    b: usize,
) -> Result<Selection> {
    let unlabeled: Vec<_> = pool.target_unlabeled().collect();
    let outcome = sfda_bootstrap(model, &unlabeled, sfda, cfg.k, b)?;
    let mut ids = outcome.active.clone();
    if ids.len() < b {
        let taken: HashSet<SampleId> = ids.iter().copied().collect();
        let keyed = unlabeled
            .iter()
            .filter(|s| !taken.contains(&s.id))
            .map(|s| Ok((s.id, model.predict_proba(&s.x)?.max())))
            .collect::<Result<Vec<_>>>()?;
        ids.extend(top_b_ascending(&keyed, b - ids.len()));
    }
    let scores = ids
        .iter()
        .map(|&id| {
            let s = pool.sample(id).expect("pool sample");
            Ok(model.predict_proba(&s.x)?.max())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection {
        ids,
        scores,
        partition: None,
        sim_labels: Vec::new(),
        gmm: None,
        sfda: Some(SfdaTrace {
            t_v: outcome.t_v,
            t_c: outcome.t_c,
            pseudo_labeled: outcome.pseudo_labeled.len(),
        }),
    })
}

fn select_baseline(
    strategy: Strategy,
    model: &Classifier,
    pool: &DataPool,
    b: usize,
    rng: &mut Rng,
) -> Result<Selection> {
    let unlabeled: Vec<_> = pool.target_unlabeled().collect();
    let (ids, scores) = match strategy {
        Strategy::Random => {
            let picks = rand::seq::index::sample(rng, unlabeled.len(), b.min(unlabeled.len()));
            let ids: Vec<SampleId> = picks.into_iter().map(|i| unlabeled[i].id).collect();
            let scores = vec![0.0; ids.len()];
            (ids, scores)
        }
        Strategy::Entropy | Strategy::LeastConfidence => {
            let keyed = unlabeled
                .iter()
                .map(|s| {
                    let p = model.predict_proba(&s.x)?;
                    Ok((s.id, if strategy == Strategy::Entropy { p.entropy() } else { p.max() }))
                })
                .collect::<Result<Vec<_>>>()?;
            let ids = if strategy == Strategy::Entropy {
                top_b_descending(&keyed, b)
            } else {
                top_b_ascending(&keyed, b)
            };
            let scores = ids
                .iter()
                .map(|id| keyed.iter().find(|(k, _)| k == id).map(|(_, v)| *v).unwrap_or(f64::NAN))
                .collect();
            (ids, scores)
        }
        Strategy::Diana => unreachable!("mixture strategy is not a baseline"),
    };
    Ok(Selection {
        ids,
        scores,
        partition: None,
        sim_labels: Vec::new(),
        gmm: None,
        sfda: None,
    })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvariantViolation(msg()))
    }
}

/// Pretrains on the source pool and runs `cfg.rounds` selection rounds,
/// annotating exactly `cfg.budget` target samples in total.
pub fn run_active_loop(cfg: &LoopConfig, pool: &mut DataPool) -> Result<RunOutcome> {
    cfg.validate()?;
    if pool.n_target_labeled() != 0 {
        return Err(Error::InvalidConfig("pool must start with no labeled target samples".into()));
    }
    if cfg.budget > pool.n_target_unlabeled() {
        return Err(Error::InvalidConfig(format!(
            "budget {} exceeds the {} unlabeled target samples",
            cfg.budget,
            pool.n_target_unlabeled()
        )));
    }
    let mut train_rng = rng_from_seed(cfg.train.seed);
    let mut select_rng = rng_from_seed(cfg.seed);
    let mut model = pretrained_model(cfg, pool, &mut train_rng)?;
    let initial_accuracy = evaluate(&model, pool)?;
    let total = pool.len();
    let b = cfg.per_round();
    let source_free = cfg.sfda.is_some();
    let mut annotated: HashSet<SampleId> = HashSet::new();
    let mut rounds = Vec::with_capacity(cfg.effective_rounds());

    for round in 1..=cfg.effective_rounds() {
        let selection = match cfg.strategy {
            Strategy::Diana => select_mixture(cfg, &model, pool, b)?,
            other => select_baseline(other, &model, pool, b, &mut select_rng)?,
        };

        check(selection.ids.len() == b, || {
            format!("round {round} selected {} samples, expected {b}", selection.ids.len())
        })?;
        for &id in &selection.ids {
            check(annotated.insert(id), || format!("sample {id} annotated twice"))?;
        }
        let mut wrong = 0usize;
        for &id in &selection.ids {
            let truth = pool.oracle_label(id)?;
            let sample = pool.sample(id).expect("pool sample");
            if model.predict(&sample.x)? != truth {
                wrong += 1;
            }
        }
        let selected_error_rate = if b == 0 { 0.0 } else { wrong as f64 / b as f64 };
        pool.annotate_batch(&selection.ids)?;

        let mut sizes = selection
            .partition
            .as_ref()
            .map(Partition::sizes)
            .unwrap_or_default();
        if selection.partition.is_none() {
            sizes.unassigned = pool.n_target_unlabeled();
        }
        check(sizes.total() == pool.n_target_unlabeled(), || {
            format!(
                "partition covers {} samples but {} remain unlabeled",
                sizes.total(),
                pool.n_target_unlabeled()
            )
        })?;
        check(pool.n_target_labeled() == round * b, || {
            format!("{} labeled target samples after round {round}", pool.n_target_labeled())
        })?;
        check(
            pool.n_source() + pool.n_target_labeled() + pool.n_target_unlabeled() == total,
            || "pool sizes do not add up".into(),
        )?;

        let train = {
            let labeled = labeled_set(pool, source_free);
            let mut data = TrainBatch {
                labeled,
                ..TrainBatch::default()
            };
            if let Some(partition) = &selection.partition {
                if cfg.train.lambda_c != 0.0 {
                    data.consistent = selection
                        .sim_labels
                        .iter()
                        .filter(|(id, _)| partition.category(*id) == Some(Category::ConfidentConsistent))
                        .map(|&(id, sim)| (pool.sample(id).expect("pool sample").x.as_slice(), sim))
                        .collect();
                }
                if cfg.train.lambda_e != 0.0 {
                    data.uncertain = partition
                        .ids(Category::UncertainConsistent)
                        .into_iter()
                        .map(|id| pool.sample(id).expect("pool sample").x.as_slice())
                        .collect();
                }
            }
            model.train(&data, &cfg.train, cfg.train.epochs_per_round, &mut train_rng)?
        };

        rounds.push(RoundReport {
            round,
            accuracy: evaluate(&model, pool)?,
            annotated_total: pool.n_target_labeled(),
            selected: selection.ids,
            selected_scores: selection.scores,
            selected_error_rate,
            partition: sizes,
            gmm: selection.gmm,
            sfda: selection.sfda,
            train,
        });
    }
    check(pool.n_target_labeled() == cfg.budget, || {
        format!("{} annotations for budget {}", pool.n_target_labeled(), cfg.budget)
    })?;
    Ok(RunOutcome {
        strategy: cfg.strategy,
        initial_accuracy,
        rounds,
        model,
    })
}

/// Runs a selection baseline. Training uses the supervised loss only.
pub fn run_baseline(cfg: &LoopConfig, pool: &mut DataPool) -> Result<RunOutcome> {
    if cfg.strategy == Strategy::Diana {
        return Err(Error::InvalidConfig("run_baseline needs a baseline strategy".into()));
    }
    let mut cfg = cfg.clone();
    cfg.train.lambda_c = 0.0;
    cfg.train.lambda_e = 0.0;
    run_active_loop(&cfg, pool)
}

/// Dispatches to [`run_active_loop`] or [`run_baseline`].
pub fn run(cfg: &LoopConfig, pool: &mut DataPool) -> Result<RunOutcome> {
    match cfg.strategy {
        Strategy::Diana => run_active_loop(cfg, pool),
        _ => run_baseline(cfg, pool),
    }
}

/// A full experiment: a dataset recipe (or file) and a loop configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: ShiftConfig,
    /// Reads samples from a dataset file instead of generating them.
    pub dataset_file: Option<PathBuf>,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
}


impl ExperimentConfig {
    pub fn load_pool(&self) -> Result<DataPool> {
        match &self.dataset_file {
            Some(path) => DataPool::read(path),
            None => generate_shifted_dataset(&self.dataset),
        }
    }

    /// Same experiment with every seed (dataset, selection, training) set
    /// to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.dataset.seed = seed;
        cfg.loop_cfg.seed = seed;
        cfg.loop_cfg.train.seed = seed;
        cfg
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        let mut cfg = self.clone();
        cfg.loop_cfg.strategy = strategy;
        cfg
    }

    pub fn run(&self) -> Result<RunOutcome> {
        let mut pool = self.load_pool()?;
        run(&self.loop_cfg, &mut pool)
    }
}

/// One line of the aggregate comparison CSV. Round 0 is the pretrained
/// model and has no selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub selected_error_rate: Option<f64>,
}

pub fn aggregate_rows(outcome: &RunOutcome, seed: u64) -> Vec<AggregateRow> {
    std::iter::once(AggregateRow {
        strategy: outcome.strategy,
        seed,
        round: 0,
        accuracy: outcome.initial_accuracy,
        selected_error_rate: None,
    })
    .chain(outcome.rounds.iter().map(|r| AggregateRow {
        strategy: outcome.strategy,
        seed,
        round: r.round,
        accuracy: r.accuracy,
        selected_error_rate: Some(r.selected_error_rate),
    }))
    .collect()
}

/// Runs every strategy on every seed in `seeds`.
pub fn compare(
    base: &ExperimentConfig,
    strategies: &[Strategy],
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<(u64, RunOutcome)>> {
    let mut out = Vec::new();
    for seed in seeds {
        for &strategy in strategies {
            let outcome = base.with_seed(seed).with_strategy(strategy).run()?;
            out.push((seed, outcome));
        }
    }
    Ok(out)
}

/// Consistency-rate splits for one pretrained model and one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub seed: u64,
    pub k: usize,
    pub quantile: f64,
    pub n_well_learnt: usize,
    pub n_underfitted: usize,
    pub rate_well_learnt: Option<f64>,
    pub rate_underfitted: Option<f64>,
}

impl ConsistencyRow {
    fn new(seed: u64, s: ConsistencySplit) -> Self {
        Self {
            seed,
            k: s.k,
            quantile: s.quantile,
            n_well_learnt: s.n_well_learnt,
            n_underfitted: s.n_underfitted,
            rate_well_learnt: s.rate_well_learnt,
            rate_underfitted: s.rate_underfitted,
        }
    }
}

/// Pretrains a model per seed and measures the consistency rate of the
/// well-learnt and underfitted parts of the target pool for every `k`,
/// using source centroids.
pub fn diagnose_consistency(
    base: &ExperimentConfig,
    k_sweep: &[usize],
    seeds: impl IntoIterator<Item = u64>,
    quantiles: &[f64],
) -> Result<Vec<ConsistencyRow>> {
    let mut rows = Vec::new();
    for seed in seeds {
        let cfg = base.with_seed(seed);
        let pool = cfg.load_pool()?;
        let mut rng = rng_from_seed(cfg.loop_cfg.train.seed);
        let model = pretrained_model(&cfg.loop_cfg, &pool, &mut rng)?;
        let centroids = compute_centroids(
            &model,
            pool.labeled().map(|(s, y)| (s.x.as_slice(), y)),
        )?;
        for &k in k_sweep {
            if k == 0 || k > model.d_feat() {
                return Err(Error::TopKTooLarge {
                    k,
                    dim: model.d_feat(),
                });
            }
            for split in consistency_diagnostic(&model, &pool, &centroids, k, quantiles)? {
                rows.push(ConsistencyRow::new(seed, split));
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
