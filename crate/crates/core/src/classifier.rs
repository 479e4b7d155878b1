//! One-hidden-layer softmax classifier with hand-derived gradients.
//!
//! `feature = tanh(W_h x + b_h)` plays the role of the feature extractor and
//! `softmax(W_o feature + b_o)` the class posterior. Three losses are
//! supported: cross-entropy on labeled pairs, cross-entropy on perturbed
//! inputs against a fixed similarity label (consistency), and prediction
//! entropy. Their weighted sum is minimized with plain SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapool::standard_normal;
use crate::error::{Error, Result};
use crate::math::{all_finite, argmax, log_softmax, Rng};

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || !p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("probability vector"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Predicted class; smallest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Output of [`Classifier::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub feature: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: ProbVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs_per_round: usize,
    /// Epochs of supervised training on the source pool before adaptation.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lambda_c: f64,
    pub lambda_e: f64,
    pub aug_noise_sigma: f64,
    pub aug_dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs_per_round: 30,
            pretrain_epochs: 30,
            batch_size: 32,
            lambda_c: 0.5,
            lambda_e: 0.1,
            aug_noise_sigma: 0.1,
            aug_dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda_c.is_finite() && self.lambda_e.is_finite()) {
            return bad("loss weights must be finite");
        }
        if !(self.aug_noise_sigma >= 0.0 && self.aug_noise_sigma.is_finite()) {
            return bad("aug_noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.aug_dropout_p) {
            return bad("aug_dropout_p must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Perturbs `x`: each coordinate is zeroed with probability `aug_dropout_p`,
/// then Gaussian noise with standard deviation `aug_noise_sigma` is added.
/// Random draws are skipped entirely for a zero rate or zero sigma.
pub fn augment(x: &[f64], cfg: &TrainConfig, rng: &mut Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let kept = if cfg.aug_dropout_p > 0.0 && rng.random::<f64>() < cfg.aug_dropout_p {
                0.0
            } else {
                v
            };
            if cfg.aug_noise_sigma > 0.0 {
                kept + cfg.aug_noise_sigma * standard_normal(rng)
            } else {
                kept
            }
        })
        .collect()
}

/// A loss term that may be evaluated over an empty batch. Empty batches
/// contribute zero and raise the `empty` flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    pub empty: bool,
}

impl LossTerm {
    fn empty() -> Self {
        Self {
            value: 0.0,
            empty: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: LossTerm,
    pub entropy: LossTerm,
    pub total: f64,
}

/// Inputs of one optimization step.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch<'a> {
    /// Labeled `(x, y)` pairs from the source and labeled target sets.
    pub labeled: Vec<(&'a [f64], usize)>,
    /// Confident-consistent `(x, similarity_label)` pairs.
    pub consistent: Vec<(&'a [f64], usize)>,
    /// Uncertain-consistent inputs.
    pub uncertain: Vec<&'a [f64]>,
}

/// Gradient with the same layout as the classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &Classifier) -> Self {
        Self {
            w_hidden: vec![0.0; model.w_hidden.len()],
            b_hidden: vec![0.0; model.b_hidden.len()],
            w_out: vec![0.0; model.w_out.len()],
            b_out: vec![0.0; model.b_out.len()],
        }
    }

    /// Flattened in the order of [`Classifier::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.w_hidden
            .iter()
            .chain(&self.b_hidden)
            .chain(&self.w_out)
            .chain(&self.b_out)
            .copied()
            .collect()
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| all_finite(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    d_in: usize,
    d_feat: usize,
    n_classes: usize,
    /// `d_feat x d_in`, row-major.
    w_hidden: Vec<f64>,
    b_hidden: Vec<f64>,
    /// `n_classes x d_feat`, row-major.
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl Classifier {
    /// Xavier-uniform weights, zero biases.
    pub fn new(d_in: usize, d_feat: usize, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(d_in, d_feat, n_classes)?;
        let limit_h = (6.0 / (d_in + d_feat) as f64).sqrt();
        let limit_o = (6.0 / (d_feat + n_classes) as f64).sqrt();
        for w in &mut model.w_hidden {
            *w = rng.random_range(-limit_h..limit_h);
        }
        for w in &mut model.w_out {
            *w = rng.random_range(-limit_o..limit_o);
        }
        Ok(model)
    }

    pub fn zeros(d_in: usize, d_feat: usize, n_classes: usize) -> Result<Self> {
        if d_in == 0 || d_feat == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig(
                "classifier dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            d_in,
            d_feat,
            n_classes,
            w_hidden: vec![0.0; d_feat * d_in],
            b_hidden: vec![0.0; d_feat],
            w_out: vec![0.0; n_classes * d_feat],
            b_out: vec![0.0; n_classes],
        })
    }

    /// A model that ignores its input: zero weights, features `tanh(feature_bias)`
    /// and output logits `logits`.
    pub fn constant(d_in: usize, feature_bias: &[f64], logits: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(d_in, feature_bias.len(), logits.len())?;
        model.b_hidden.copy_from_slice(feature_bias);
        model.b_out.copy_from_slice(logits);
        Ok(model)
    }

    /// Builds a model from explicit parameter matrices (row-major
    /// `d_feat x d_in` and `n_classes x d_feat`).
    pub fn from_parts(
        d_in: usize,
        w_hidden: Vec<f64>,
        b_hidden: Vec<f64>,
        w_out: Vec<f64>,
        b_out: Vec<f64>,
    ) -> Result<Self> {
        let d_feat = b_hidden.len();
        let n_classes = b_out.len();
        let mut model = Self::zeros(d_in, d_feat, n_classes)?;
        for (got, expected) in [
            (w_hidden.len(), d_feat * d_in),
            (w_out.len(), n_classes * d_feat),
        ] {
            if got != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: got,
                });
            }
        }
        model.w_hidden = w_hidden;
        model.b_hidden = b_hidden;
        model.w_out = w_out;
        model.b_out = b_out;
        if !model.parameters().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("classifier parameters"));
        }
        Ok(model)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                actual: x.len(),
            });
        }
        if !all_finite(x) {
            return Err(Error::NonFinite("classifier input"));
        }
        Ok(())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.n_classes {
            return Err(Error::ClassOutOfRange {
                class: y,
                n_classes: self.n_classes,
            });
        }
        Ok(())
    }

    /// Feature vector `tanh(W_h x + b_h)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.features_unchecked(x))
    }

    fn features_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.w_hidden
            .chunks_exact(self.d_in)
            .zip(&self.b_hidden)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let feature = self.features_unchecked(x);
        let logits: Vec<f64> = self
            .w_out
            .chunks_exact(self.d_feat)
            .zip(&self.b_out)
            .map(|(row, b)| row.iter().zip(&feature).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect();
        let log_probs = log_softmax(&logits);
        let p: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let sum: f64 = p.iter().sum();
        let probs = ProbVec(p.into_iter().map(|v| v / sum).collect());
        Ok(Forward {
            feature,
            log_probs,
            probs,
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVec> {
        Ok(self.forward(x)?.probs)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.probs.argmax())
    }

    /// All parameters flattened as `W_h, b_h, W_o, b_o`.
    pub fn parameters(&self) -> Vec<f64> {
        self.w_hidden
            .iter()
            .chain(&self.b_hidden)
            .chain(&self.w_out)
            .chain(&self.b_out)
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        let mut rest = params;
        for dst in [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Backpropagates `d_logits` (the loss gradient w.r.t. the logits of
    /// one sample) into `grad`, scaled by `weight`.
    fn backprop(&self, x: &[f64], feature: &[f64], d_logits: &[f64], weight: f64, grad: &mut Gradients) {
        let mut d_feature = vec![0.0; self.d_feat];
        for (c, &dz) in d_logits.iter().enumerate() {
            let dz = dz * weight;
            grad.b_out[c] += dz;
            let row = &self.w_out[c * self.d_feat..(c + 1) * self.d_feat];
            let grow = &mut grad.w_out[c * self.d_feat..(c + 1) * self.d_feat];
            for j in 0..self.d_feat {
                grow[j] += dz * feature[j];
                d_feature[j] += dz * row[j];
            }
        }
        for j in 0..self.d_feat {
            let dpre = d_feature[j] * (1.0 - feature[j] * feature[j]);
            grad.b_hidden[j] += dpre;
            let grow = &mut grad.w_hidden[j * self.d_in..(j + 1) * self.d_in];
            for (g, v) in grow.iter_mut().zip(x) {
                *g += dpre * v;
            }
        }
    }

    /// Mean cross-entropy and its gradient over `(x, target)` pairs.
    fn cross_entropy_grad(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
        let mut grad = Gradients::zeros_like(self);
        let weight = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &(x, y) in batch {
            self.check_class(y)?;
            let fwd = self.forward(x)?;
            loss -= fwd.log_probs[y];
            let mut d_logits: Vec<f64> = fwd.probs.as_slice().to_vec();
            d_logits[y] -= 1.0;
            self.backprop(x, &fwd.feature, &d_logits, weight, &mut grad);
        }
        Ok((loss * weight, grad))
    }

    fn cross_entropy(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        let mut loss = 0.0;
        for &(x, y) in batch {
            self.check_class(y)?;
            loss -= self.forward(x)?.log_probs[y];
        }
        Ok(loss / batch.len() as f64)
    }

    /// Mean of `-log P_y(x)` over a non-empty labeled batch.
    pub fn loss_supervised(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("loss_supervised"));
        }
        self.cross_entropy(batch)
    }

    pub fn grad_supervised(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("grad_supervised"));
        }
        self.cross_entropy_grad(batch)
    }

    /// Mean of `-log P_label(augment(x))` over `(x, similarity_label)` pairs.
    pub fn loss_consistency(
        &self,
        batch: &[(&[f64], usize)],
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<LossTerm> {
        if batch.is_empty() {
            return Ok(LossTerm::empty());
        }
        let perturbed = perturb(batch, cfg, rng);
        let refs: Vec<(&[f64], usize)> = perturbed.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        Ok(LossTerm {
            value: self.cross_entropy(&refs)?,
            empty: false,
        })
    }

    /// Consistency gradient for inputs that have already been perturbed.
    /// The perturbed input and the similarity label are both constants.
    pub fn grad_consistency(&self, perturbed: &[(&[f64], usize)]) -> Result<(LossTerm, Gradients)> {
        if perturbed.is_empty() {
            return Ok((LossTerm::empty(), Gradients::zeros_like(self)));
        }
        let (value, grad) = self.cross_entropy_grad(perturbed)?;
        Ok((
            LossTerm {
                value,
                empty: false,
            },
            grad,
        ))
    }

    /// Mean prediction entropy `-sum_c P_c log P_c`.
    pub fn loss_entropy(&self, batch: &[&[f64]]) -> Result<LossTerm> {
        if batch.is_empty() {
            return Ok(LossTerm::empty());
        }
        let mut total = 0.0;
        for &x in batch {
            let fwd = self.forward(x)?;
            total += entropy_from_logs(&fwd);
        }
        Ok(LossTerm {
            value: total / batch.len() as f64,
            empty: false,
        })
    }

    pub fn grad_entropy(&self, batch: &[&[f64]]) -> Result<(LossTerm, Gradients)> {
        let mut grad = Gradients::zeros_like(self);
        if batch.is_empty() {
            return Ok((LossTerm::empty(), grad));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &x in batch {
            let fwd = self.forward(x)?;
            let h = entropy_from_logs(&fwd);
            total += h;
            // dH/dz_j = -p_j (log p_j + H)
            let d_logits: Vec<f64> = fwd
                .probs
                .as_slice()
                .iter()
                .zip(&fwd.log_probs)
                .map(|(p, lp)| -p * (lp + h))
                .collect();
            self.backprop(x, &fwd.feature, &d_logits, weight, &mut grad);
        }
        Ok((
            LossTerm {
                value: total * weight,
                empty: false,
            },
            grad,
        ))
    }

    /// `L_sup + lambda_c * L_con + lambda_e * L_ent`.
    pub fn total_loss(
        &self,
        batch: &TrainBatch<'_>,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        let supervised = self.loss_supervised(&batch.labeled)?;
        let consistency = self.loss_consistency(&batch.consistent, cfg, rng)?;
        let entropy = self.loss_entropy(&batch.uncertain)?;
        Ok(combine(supervised, consistency, entropy, cfg))
    }

    /// One SGD step on the total loss. The consistency inputs are perturbed
    /// once and then held fixed for the gradient. The model is unchanged if
    /// the gradient is not finite.
    pub fn backward_and_step(
        &mut self,
        batch: &TrainBatch<'_>,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        let (supervised, mut grad) = self.grad_supervised(&batch.labeled)?;
        let perturbed = perturb(&batch.consistent, cfg, rng);
        let refs: Vec<(&[f64], usize)> = perturbed.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (consistency, g_con) = self.grad_consistency(&refs)?;
        let (entropy, g_ent) = self.grad_entropy(&batch.uncertain)?;
        if !consistency.empty {
            grad.add_scaled(&g_con, cfg.lambda_c);
        }
        if !entropy.empty {
            grad.add_scaled(&g_ent, cfg.lambda_e);
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        grad.scale(cfg.learning_rate);
        self.apply_update(&grad);
        Ok(combine(supervised, consistency, entropy, cfg))
    }

    fn apply_update(&mut self, step: &Gradients) {
        for (params, delta) in [
            (&mut self.w_hidden, &step.w_hidden),
            (&mut self.b_hidden, &step.b_hidden),
            (&mut self.w_out, &step.w_out),
            (&mut self.b_out, &step.b_out),
        ] {
            for (p, d) in params.iter_mut().zip(delta) {
                *p -= d;
            }
        }
    }

    /// Runs `epochs` passes over the labeled set in shuffled mini-batches.
    /// Each step pairs the labeled mini-batch with the next `batch_size`
    /// consistent and uncertain samples, cycling through their shuffled
    /// orders.
    pub fn train(
        &mut self,
        data: &TrainBatch<'_>,
        cfg: &TrainConfig,
        epochs: usize,
        rng: &mut Rng,
    ) -> Result<TrainSummary> {
        if data.labeled.is_empty() {
            return Err(Error::EmptyBatch("train"));
        }
        let bs = cfg.batch_size.max(1);
        let mut labeled_order: Vec<usize> = (0..data.labeled.len()).collect();
        let mut con_cursor = Cursor::new(data.consistent.len(), rng);
        let mut ent_cursor = Cursor::new(data.uncertain.len(), rng);
        let mut summary = TrainSummary::default();
        for _ in 0..epochs {
            labeled_order.shuffle(rng);
            let mut epoch_loss = 0.0;
            let mut steps = 0usize;
            for chunk in labeled_order.chunks(bs) {
                let step = TrainBatch {
                    labeled: chunk.iter().map(|&i| data.labeled[i]).collect(),
                    consistent: con_cursor
                        .take(bs, rng)
                        .into_iter()
                        .map(|i| data.consistent[i])
                        .collect(),
                    uncertain: ent_cursor
                        .take(bs, rng)
                        .into_iter()
                        .map(|i| data.uncertain[i])
                        .collect(),
                };
                let losses = self.backward_and_step(&step, cfg, rng)?;
                epoch_loss += losses.total;
                steps += 1;
                summary.consistency_empty |= losses.consistency.empty;
                summary.entropy_empty |= losses.entropy.empty;
            }
            summary.steps += steps;
            summary.last_epoch_loss = epoch_loss / steps as f64;
        }
        Ok(summary)
    }

    pub fn to_checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            model: self.clone(),
            train: train.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub last_epoch_loss: f64,
    pub consistency_empty: bool,
    pub entropy_empty: bool,
}

/// Shuffled cyclic iterator over `0..len`.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let n = n.min(self.order.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn perturb(batch: &[(&[f64], usize)], cfg: &TrainConfig, rng: &mut Rng) -> Vec<(Vec<f64>, usize)> {
    batch
        .iter()
        .map(|&(x, y)| (augment(x, cfg, rng), y))
        .collect()
}

fn entropy_from_logs(fwd: &Forward) -> f64 {
    -fwd.probs
        .as_slice()
        .iter()
        .zip(&fwd.log_probs)
        .map(|(p, lp)| p * lp)
        .sum::<f64>()
}

fn combine(supervised: f64, consistency: LossTerm, entropy: LossTerm, cfg: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        supervised,
        consistency,
        entropy,
        total: supervised + cfg.lambda_c * consistency.value + cfg.lambda_e * entropy.value,
    }
}

/// Versioned JSON model dump. `serde_json` writes shortest round-trip float
/// representations, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Classifier,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.version != Self::VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let m = &ckpt.model;
        if m.w_hidden.len() != m.d_feat * m.d_in
            || m.b_hidden.len() != m.d_feat
            || m.w_out.len() != m.n_classes * m.d_feat
            || m.b_out.len() != m.n_classes
        {
            return Err(Error::InvalidConfig("checkpoint parameter shapes".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;
    use approx::assert_relative_eq;

    fn random_model(seed: u64) -> Classifier {
        let mut rng = rng_from_seed(seed);
        Classifier::new(3, 4, 3, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let model = Classifier::zeros(4, 6, 5).unwrap();
        let p = model.predict_proba(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        for &v in p.as_slice() {
            assert_relative_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_class_network() {
        // h = tanh(2x + 0.5); logits = (1.5 h, -h + 0.25)
        let model =
            Classifier::from_parts(1, vec![2.0], vec![0.5], vec![1.5, -1.0], vec![0.0, 0.25])
                .unwrap();
        let x = 0.3f64;
        let h = (2.0 * x + 0.5).tanh();
        let z0 = 1.5 * h;
        let z1 = -h + 0.25;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let fwd = model.forward(&[x]).unwrap();
        assert_relative_eq!(fwd.feature[0], h, epsilon = 1e-15);
        assert_relative_eq!(fwd.probs.get(0), p0, epsilon = 1e-14);
        assert_relative_eq!(fwd.probs.get(1), 1.0 - p0, epsilon = 1e-14);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let model = random_model(0);
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            model.forward(&[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn supervised_loss_examples() {
        let uniform = Classifier::zeros(2, 3, 4).unwrap();
        let x = [0.5, -0.5];
        assert_relative_eq!(
            uniform.loss_supervised(&[(&x, 1)]).unwrap(),
            4f64.ln(),
            epsilon = 1e-14
        );
        assert!(matches!(
            uniform.loss_supervised(&[]),
            Err(Error::EmptyBatch(_))
        ));

        // saturated logits give P_y = 1 to machine precision
        let perfect = Classifier::constant(2, &[0.0], &[1000.0, 0.0]).unwrap();
        assert_eq!(perfect.loss_supervised(&[(&x, 0)]).unwrap(), 0.0);

        let half = Classifier::constant(2, &[0.0], &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]).unwrap();
        let expected = (-(0.5f64.ln()) - 0.25f64.ln()) / 2.0;
        assert_relative_eq!(
            half.loss_supervised(&[(&x, 0), (&x, 1)]).unwrap(),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn augment_identity_dropout_and_determinism() {
        let x = [1.0, -2.0, 3.0, 4.0];
        let identity = TrainConfig {
            aug_noise_sigma: 0.0,
            aug_dropout_p: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = rng_from_seed(1);
        assert_eq!(augment(&x, &identity, &mut rng), x.to_vec());

        let drop_all = TrainConfig {
            aug_noise_sigma: 0.0,
            aug_dropout_p: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(augment(&x, &drop_all, &mut rng), vec![0.0; 4]);

        let noisy = TrainConfig::default();
        let a = augment(&x, &noisy, &mut rng_from_seed(9));
        let b = augment(&x, &noisy, &mut rng_from_seed(9));
        assert_eq!(a, b);
        assert_ne!(a, x.to_vec());
    }

    #[test]
    fn consistency_loss_examples() {
        let x = [0.1, 0.2];
        let identity = TrainConfig {
            aug_noise_sigma: 0.0,
            aug_dropout_p: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = rng_from_seed(0);
        let model = Classifier::constant(2, &[0.0], &[0.8f64.ln(), 0.2f64.ln()]).unwrap();
        let term = model.loss_consistency(&[(&x, 0)], &identity, &mut rng).unwrap();
        assert!(!term.empty);
        assert_relative_eq!(term.value, -(0.8f64.ln()), epsilon = 1e-14);

        let empty = model.loss_consistency(&[], &identity, &mut rng).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn entropy_loss_examples() {
        let x = [0.0, 0.0];
        let model = Classifier::constant(2, &[0.0], &[0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let expected = -0.9 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert_relative_eq!(expected, 0.3251, epsilon = 1e-4);
        let term = model.loss_entropy(&[&x]).unwrap();
        assert_relative_eq!(term.value, expected, epsilon = 1e-14);

        let uniform = Classifier::zeros(2, 2, 7).unwrap();
        assert_relative_eq!(
            uniform.loss_entropy(&[&x]).unwrap().value,
            7f64.ln(),
            epsilon = 1e-14
        );
        let onehot = Classifier::constant(2, &[0.0], &[1000.0, 0.0, 0.0]).unwrap();
        assert_eq!(onehot.loss_entropy(&[&x]).unwrap().value, 0.0);
        assert!(uniform.loss_entropy(&[]).unwrap().empty);
    }

    #[test]
    fn total_loss_weights() {
        let cfg = TrainConfig::default();
        let combined = combine(
            1.0,
            LossTerm {
                value: 0.4,
                empty: false,
            },
            LossTerm {
                value: 0.2,
                empty: false,
            },
            &cfg,
        );
        assert_relative_eq!(combined.total, 1.22, epsilon = 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut model = random_model(2);
        let before = model.parameters();
        let x = [0.3, -0.1, 0.7];
        let batch = TrainBatch {
            labeled: vec![(&x, 1)],
            consistent: vec![(&x, 2)],
            uncertain: vec![&x],
        };
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        model.backward_and_step(&batch, &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(model.parameters(), before);
    }

    #[test]
    fn single_step_decreases_sample_loss() {
        for seed in 0..10 {
            let mut model = random_model(seed);
            let x = [0.3, -0.1, 0.7];
            let batch = TrainBatch {
                labeled: vec![(&x, (seed % 3) as usize)],
                ..TrainBatch::default()
            };
            let before = model.loss_supervised(&batch.labeled).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            model.backward_and_step(&batch, &cfg, &mut rng_from_seed(0)).unwrap();
            let after = model.loss_supervised(&batch.labeled).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut model = random_model(4);
        let before = model.parameters();
        let x = [0.3, -0.1, 0.7];
        let batch = TrainBatch {
            labeled: vec![(&x, 0)],
            consistent: vec![(&x, 1)],
            ..TrainBatch::default()
        };
        let cfg = TrainConfig {
            lambda_c: f64::INFINITY,
            aug_noise_sigma: 0.0,
            aug_dropout_p: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            model.backward_and_step(&batch, &cfg, &mut rng_from_seed(0)),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(model.parameters(), before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = random_model(5);
        let ckpt = model.to_checkpoint(&TrainConfig::default());
        let json = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        let a: Vec<u64> = model.parameters().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.model.parameters().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.train, TrainConfig::default());
    }

    #[test]
    fn training_fits_separable_data() {
        let mut rng = rng_from_seed(0);
        let mut model = Classifier::new(2, 8, 2, &mut rng).unwrap();
        let xs: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [s * (1.0 + (i as f64) * 0.01), s * 0.5]
            })
            .collect();
        let labeled: Vec<(&[f64], usize)> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.as_slice(), i % 2))
            .collect();
        let data = TrainBatch {
            labeled,
            ..TrainBatch::default()
        };
        let summary = model.train(&data, &TrainConfig::default(), 30, &mut rng).unwrap();
        assert!(summary.consistency_empty && summary.entropy_empty);
        let correct = data
            .labeled
            .iter()
            .filter(|(x, y)| model.predict(x).unwrap() == *y)
            .count();
        assert_eq!(correct, 40);
    }
}
