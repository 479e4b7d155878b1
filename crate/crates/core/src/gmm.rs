//! Four-component, one-dimensional Gaussian mixture over informativeness
//! scores, fitted by semi-supervised EM.
//!
//! Labeled scores carry a hard component assignment (their observation
//! label) and unlabeled scores get soft posteriors. The two groups enter the
//! M-step with weights `alpha` and `1 - alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_normal_pdf, log_sum_exp};
use crate::scoring::Category;

pub const K: usize = 4;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-6;
/// Components with less total weighted responsibility keep their previous
/// mean and variance.
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub pi: [f64; K],
    pub mu: [f64; K],
    pub sigma2: [f64; K],
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvariantViolation(format!(
                "mixture weights {:?} are not on the simplex",
                self.pi
            )));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mixture means"));
        }
        if self
            .sigma2
            .iter()
            .any(|s| !s.is_finite() || *s < VARIANCE_FLOOR)
        {
            return Err(Error::InvariantViolation(format!(
                "variances {:?} below floor",
                self.sigma2
            )));
        }
        Ok(())
    }

    /// `ln(pi_k) + ln N(score; mu_k, sigma2_k)` for every component.
    pub fn log_joint(&self, score: f64) -> [f64; K] {
        std::array::from_fn(|k| self.pi[k].ln() + log_normal_pdf(score, self.mu[k], self.sigma2[k]))
    }

    pub fn log_density(&self, score: f64) -> f64 {
        log_sum_exp(&self.log_joint(score))
    }

    fn max_abs_diff(&self, other: &GmmParams) -> f64 {
        (0..K)
            .flat_map(|k| {
                [
                    (self.pi[k] - other.pi[k]).abs(),
                    (self.mu[k] - other.mu[k]).abs(),
                    (self.sigma2[k] - other.sigma2[k]).abs(),
                ]
            })
            .fold(0.0, f64::max)
    }
}

/// Mixture density at `score`.
pub fn gmm_density(score: f64, params: &GmmParams) -> f64 {
    params.log_density(score).exp()
}

/// Posterior over the four components for a single score.
pub fn component_posterior(score: f64, params: &GmmParams) -> [f64; K] {
    let lj = params.log_joint(score);
    let lse = log_sum_exp(&lj);
    if lse == f64::NEG_INFINITY {
        return params.pi;
    }
    let mut post: [f64; K] = std::array::from_fn(|k| (lj[k] - lse).exp());
    let s: f64 = post.iter().sum();
    post.iter_mut().for_each(|p| *p /= s);
    post
}

/// Training data for one fit: labeled scores with their observation labels,
/// unlabeled scores, and the labeled-group weight `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTrainSet {
    pub labeled: Vec<(f64, Category)>,
    pub unlabeled: Vec<f64>,
    pub alpha: f64,
}

impl GmmTrainSet {
    /// Uses `alpha = |D_L| / (|D_L| + |D_U|)`.
    pub fn new(labeled: Vec<(f64, Category)>, unlabeled: Vec<f64>) -> Result<Self> {
        let alpha = labeled.len() as f64 / (labeled.len() + unlabeled.len()).max(1) as f64;
        Self::with_alpha(labeled, unlabeled, alpha)
    }

    pub fn with_alpha(labeled: Vec<(f64, Category)>, unlabeled: Vec<f64>, alpha: f64) -> Result<Self> {
        let set = Self {
            labeled,
            unlabeled,
            alpha,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::EmptyBatch("gmm labeled set"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.total_weight() <= 0.0 {
            return Err(Error::InvalidConfig(
                "alpha gives zero total weight to the training set".into(),
            ));
        }
        if self
            .labeled
            .iter()
            .map(|(s, _)| s)
            .chain(&self.unlabeled)
            .any(|s| !s.is_finite())
        {
            return Err(Error::NonFinite("gmm scores"));
        }
        Ok(())
    }

    fn total_weight(&self) -> f64 {
        self.alpha * self.labeled.len() as f64 + (1.0 - self.alpha) * self.unlabeled.len() as f64
    }

    /// Weighted log-likelihood maximized by the EM iterations: labeled
    /// scores contribute `ln(pi_q N(l; mu_q, sigma2_q))` at their observed
    /// component, unlabeled scores the log mixture density.
    pub fn objective(&self, params: &GmmParams) -> f64 {
        let labeled: f64 = self
            .labeled
            .iter()
            .map(|&(s, q)| params.log_joint(s)[q.index()])
            .sum();
        let unlabeled: f64 = self.unlabeled.iter().map(|&s| params.log_density(s)).sum();
        // Skip zero-weight groups so 0 * -inf does not poison the sum.
        let mut total = 0.0;
        if self.alpha > 0.0 {
            total += self.alpha * labeled;
        }
        if self.alpha < 1.0 {
            total += (1.0 - self.alpha) * unlabeled;
        }
        total
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Initial parameters from the labeled anchors alone: Laplace-smoothed
/// weights, per-component sample mean and variance, falling back to global
/// statistics for components with too few anchors.
pub fn init_from_labeled(labeled: &[(f64, Category)]) -> Result<GmmParams> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("init_from_labeled"));
    }
    let all: Vec<f64> = labeled.iter().map(|(s, _)| *s).collect();
    let (global_mean, global_var) = mean_var(&all);
    let n = labeled.len() as f64;
    let mut params = GmmParams {
        pi: [0.0; K],
        mu: [0.0; K],
        sigma2: [0.0; K],
    };
    for k in 0..K {
        let scores: Vec<f64> = labeled
            .iter()
            .filter(|(_, q)| q.index() == k)
            .map(|(s, _)| *s)
            .collect();
        params.pi[k] = (scores.len() as f64 + 1.0) / (n + K as f64);
        let (mean, var) = if scores.is_empty() {
            (global_mean, global_var)
        } else {
            let (m, v) = mean_var(&scores);
            (m, if scores.len() <= 1 { global_var } else { v })
        };
        params.mu[k] = mean;
        params.sigma2[k] = var.max(VARIANCE_FLOOR);
    }
    Ok(params)
}

/// Component responsibilities from one E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// One-hot rows at each labeled score's observation label.
    pub labeled: Vec<[f64; K]>,
    /// Posterior rows for the unlabeled scores.
    pub unlabeled: Vec<[f64; K]>,
}

pub fn e_step(set: &GmmTrainSet, params: &GmmParams) -> Responsibilities {
    let labeled = set
        .labeled
        .iter()
        .map(|&(_, q)| {
            let mut row = [0.0; K];
            row[q.index()] = 1.0;
            row
        })
        .collect();
    let unlabeled = set
        .unlabeled
        .iter()
        .map(|&s| component_posterior(s, params))
        .collect();
    Responsibilities { labeled, unlabeled }
}

/// Weighted maximum-likelihood update. Components whose total weighted
/// responsibility falls below [`MIN_COMPONENT_WEIGHT`] keep the mean and
/// variance from `previous`.
pub fn m_step(set: &GmmTrainSet, resp: &Responsibilities, previous: &GmmParams) -> GmmParams {
    let a = set.alpha;
    let total = set.total_weight();
    let mut next = *previous;
    for k in 0..K {
        let mut weight = 0.0;
        let mut weighted_sum = 0.0;
        for (&(s, _), r) in set.labeled.iter().zip(&resp.labeled) {
            weight += a * r[k];
            weighted_sum += a * r[k] * s;
        }
        for (&s, r) in set.unlabeled.iter().zip(&resp.unlabeled) {
            weight += (1.0 - a) * r[k];
            weighted_sum += (1.0 - a) * r[k] * s;
        }
        next.pi[k] = weight / total;
        if weight < MIN_COMPONENT_WEIGHT {
            continue;
        }
        let mu = weighted_sum / weight;
        let mut sq = 0.0;
        for (&(s, _), r) in set.labeled.iter().zip(&resp.labeled) {
            sq += a * r[k] * (s - mu).powi(2);
        }
        for (&s, r) in set.unlabeled.iter().zip(&resp.unlabeled) {
            sq += (1.0 - a) * r[k] * (s - mu).powi(2);
        }
        next.mu[k] = mu;
        next.sigma2[k] = (sq / weight).max(VARIANCE_FLOOR);
    }
    let s: f64 = next.pi.iter().sum();
    next.pi.iter_mut().for_each(|p| *p /= s);
    next
}

/// Result of [`fit_gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub params: GmmParams,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
}

impl GmmFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn report(&self) -> GmmReport {
        GmmReport {
            pi: self.params.pi,
            mu: self.params.mu,
            sigma2: self.params.sigma2,
            iterations: self.iterations,
            objective: self.objective(),
        }
    }
}

/// JSON dump of a fitted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmReport {
    pub pi: [f64; K],
    pub mu: [f64; K],
    pub sigma2: [f64; K],
    pub iterations: usize,
    pub objective: f64,
}

/// Alternates E and M steps from the labeled initialization until no
/// parameter moves by more than [`TOLERANCE`] or [`MAX_ITERATIONS`] is hit.
pub fn fit_gmm(set: &GmmTrainSet) -> Result<GmmFit> {
    set.validate()?;
    let mut params = init_from_labeled(&set.labeled)?;
    let mut trace = vec![set.objective(&params)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let resp = e_step(set, &params);
        let next = m_step(set, &resp, &params);
        iterations += 1;
        trace.push(set.objective(&next));
        let delta = next.max_abs_diff(&params);
        params = next;
        if delta < TOLERANCE {
            converged = true;
            break;
        }
    }
    params.validate()?;
    Ok(GmmFit {
        params,
        iterations,
        converged,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use Category::*;

    fn single(mu: f64, sigma2: f64) -> GmmParams {
        GmmParams {
            pi: [1.0, 0.0, 0.0, 0.0],
            mu: [mu, 5.0, 10.0, 15.0],
            sigma2: [sigma2, 1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn init_examples() {
        let labeled = [
            (0.1, ConfidentConsistent),
            (0.1, ConfidentConsistent),
            (2.0, UncertainInconsistent),
            (2.0, UncertainInconsistent),
        ];
        let p = init_from_labeled(&labeled).unwrap();
        assert_relative_eq!(p.mu[0], 0.1);
        assert_relative_eq!(p.mu[2], 2.0);
        assert_eq!(p.pi, [3.0 / 8.0, 1.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0]);
        // empty components fall back to global statistics
        assert_relative_eq!(p.mu[1], 1.05, epsilon = 1e-15);
        assert_relative_eq!(p.sigma2[1], 0.9025, epsilon = 1e-12);
        assert_eq!(p.sigma2[0], VARIANCE_FLOOR);

        let same = [(0.7, ConfidentConsistent), (0.7, UncertainConsistent), (0.7, ConfidentConsistent)];
        let p = init_from_labeled(&same).unwrap();
        assert_eq!(p.sigma2, [VARIANCE_FLOOR; 4]);

        let one_each = [(0.1, ConfidentConsistent), (0.4, UncertainConsistent), (1.3, UncertainInconsistent), (0.2, ConfidentInconsistent)];
        let p = init_from_labeled(&one_each).unwrap();
        assert_eq!(p.mu, [0.1, 0.4, 1.3, 0.2]);

        assert!(init_from_labeled(&[]).is_err());
    }

    #[test]
    fn density_examples() {
        let p = single(0.7, 0.3);
        assert_relative_eq!(
            gmm_density(0.7, &p),
            1.0 / (2.0 * std::f64::consts::PI * 0.3).sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(gmm_density(0.2, &p), gmm_density(1.2, &p), epsilon = 1e-15);

        let two = GmmParams {
            pi: [0.5, 0.0, 0.5, 0.0],
            mu: [0.0, 0.0, 2.0, 0.0],
            sigma2: [1.0; 4],
        };
        assert_relative_eq!(gmm_density(1.0, &two), 0.2420, epsilon = 1e-4);
    }

    #[test]
    fn posterior_examples() {
        let p = single(0.0, 1.0);
        let post = component_posterior(0.3, &p);
        assert_eq!(post, [1.0, 0.0, 0.0, 0.0]);

        let sym = GmmParams {
            pi: [0.25; 4],
            mu: [0.0, 2.0, 0.0, 2.0],
            sigma2: [1.0; 4],
        };
        let post = component_posterior(1.0, &sym);
        for v in post {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        let two = GmmParams {
            pi: [0.5, 0.5, 0.0, 0.0],
            mu: [0.0, 2.0, 9.0, 9.0],
            sigma2: [1.0; 4],
        };
        let post = component_posterior(1.0, &two);
        assert_relative_eq!(post[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(post[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn e_step_examples() {
        let params = GmmParams {
            pi: [0.1, 0.2, 0.3, 0.4],
            mu: [0.0, 1.0, 3.0, 6.0],
            sigma2: [0.04; 4],
        };
        let set = GmmTrainSet::with_alpha(vec![(5.0, UncertainConsistent)], vec![0.0], 0.5).unwrap();
        let r = e_step(&set, &params);
        assert_eq!(r.labeled[0], [0.0, 1.0, 0.0, 0.0]);
        assert!(r.unlabeled[0][0] > 0.99);

        let flat = GmmParams {
            pi: [0.1, 0.2, 0.3, 0.4],
            mu: [1.0; 4],
            sigma2: [0.5; 4],
        };
        let r = e_step(&set, &flat);
        for k in 0..K {
            assert_relative_eq!(r.unlabeled[0][k], flat.pi[k], epsilon = 1e-15);
        }
    }

    /// Hand-computed M-step: labeled (0.1,CC),(0.3,CC),(2.0,UI),(1.0,UC);
    /// unlabeled 0.2 and 0.4 hard in CC, 2.6 in UI, 5.0 in CI; alpha = 0.25.
    ///
    /// Component weights: CC 0.25*2 + 0.75*2 = 2.0, UC 0.25, UI 1.0, CI 0.75;
    /// total 4.0.
    #[test]
    fn m_step_matches_hand_arithmetic() {
        let set = GmmTrainSet::with_alpha(
            vec![
                (0.1, ConfidentConsistent),
                (0.3, ConfidentConsistent),
                (2.0, UncertainInconsistent),
                (1.0, UncertainConsistent),
            ],
            vec![0.2, 0.4, 2.6, 5.0],
            0.25,
        )
        .unwrap();
        let hard = |k: usize| {
            let mut r = [0.0; K];
            r[k] = 1.0;
            r
        };
        let resp = Responsibilities {
            labeled: set.labeled.iter().map(|(_, q)| hard(q.index())).collect(),
            unlabeled: vec![hard(0), hard(0), hard(2), hard(3)],
        };
        let prev = init_from_labeled(&set.labeled).unwrap();
        let p = m_step(&set, &resp, &prev);
        assert_relative_eq!(p.pi[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.pi[1], 0.0625, epsilon = 1e-15);
        assert_relative_eq!(p.pi[2], 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.pi[3], 0.1875, epsilon = 1e-15);
        // mu_CC = (0.25*(0.1+0.3) + 0.75*(0.2+0.4)) / 2 = 0.275
        assert_relative_eq!(p.mu[0], 0.275, epsilon = 1e-15);
        assert_relative_eq!(p.mu[1], 1.0, epsilon = 1e-15);
        // mu_UI = (0.25*2.0 + 0.75*2.6) / 1 = 2.45
        assert_relative_eq!(p.mu[2], 2.45, epsilon = 1e-14);
        assert_relative_eq!(p.mu[3], 5.0, epsilon = 1e-15);
        // var_CC = (0.25*(0.175^2+0.025^2) + 0.75*(0.075^2+0.125^2)) / 2
        assert_relative_eq!(p.sigma2[0], 0.011875, epsilon = 1e-15);
        assert_eq!(p.sigma2[1], VARIANCE_FLOOR);
        // var_UI = (0.25*0.45^2 + 0.75*0.15^2) / 1
        assert_relative_eq!(p.sigma2[2], 0.0675, epsilon = 1e-14);
        assert_eq!(p.sigma2[3], VARIANCE_FLOOR);
    }

    #[test]
    fn m_step_limits() {
        let labeled = vec![
            (0.1, ConfidentConsistent),
            (0.3, ConfidentConsistent),
            (2.0, UncertainInconsistent),
            (2.4, UncertainInconsistent),
            (1.0, UncertainConsistent),
            (1.4, UncertainConsistent),
            (4.0, ConfidentInconsistent),
            (4.4, ConfidentInconsistent),
        ];
        let unlabeled = vec![0.5, 3.3, 7.0];
        let prev = init_from_labeled(&labeled).unwrap();

        // alpha = 1: supervised per-component statistics
        let set = GmmTrainSet::with_alpha(labeled.clone(), unlabeled.clone(), 1.0).unwrap();
        let p = m_step(&set, &e_step(&set, &prev), &prev);
        assert_eq!(p.pi, [0.25; 4]);
        for (k, (m, v)) in [(0.2, 0.01), (1.2, 0.04), (2.2, 0.04), (4.2, 0.04)].into_iter().enumerate() {
            assert_relative_eq!(p.mu[k], m, epsilon = 1e-12);
            assert_relative_eq!(p.sigma2[k], v, epsilon = 1e-12);
        }

        // alpha = 0: the classic unsupervised M-step
        let set = GmmTrainSet::with_alpha(labeled, unlabeled.clone(), 0.0).unwrap();
        let resp = e_step(&set, &prev);
        let p = m_step(&set, &resp, &prev);
        for k in 0..K {
            let nk: f64 = resp.unlabeled.iter().map(|r| r[k]).sum();
            let mean: f64 = resp.unlabeled.iter().zip(&unlabeled).map(|(r, s)| r[k] * s).sum::<f64>() / nk;
            let var: f64 = resp
                .unlabeled
                .iter()
                .zip(&unlabeled)
                .map(|(r, s)| r[k] * (s - mean).powi(2))
                .sum::<f64>()
                / nk;
            assert_relative_eq!(p.pi[k], nk / 3.0, epsilon = 1e-12);
            if nk >= MIN_COMPONENT_WEIGHT {
                assert_relative_eq!(p.mu[k], mean, epsilon = 1e-9);
                assert_relative_eq!(p.sigma2[k], var.max(VARIANCE_FLOOR), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn labeled_only_fit_converges_to_supervised_estimates() {
        let labeled = vec![
            (0.1, ConfidentConsistent),
            (0.3, ConfidentConsistent),
            (1.0, UncertainConsistent),
            (1.4, UncertainConsistent),
            (2.0, UncertainInconsistent),
            (2.4, UncertainInconsistent),
            (4.0, ConfidentInconsistent),
            (4.6, ConfidentInconsistent),
            (0.2, ConfidentConsistent),
        ];
        let set = GmmTrainSet::new(labeled, vec![]).unwrap();
        assert_eq!(set.alpha, 1.0);
        let fit = fit_gmm(&set).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 2);
        assert_relative_eq!(fit.params.mu[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(fit.params.mu[3], 4.3, epsilon = 1e-12);
        assert_relative_eq!(fit.params.pi[0], 3.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn train_set_validation() {
        assert!(GmmTrainSet::new(vec![], vec![1.0]).is_err());
        assert!(GmmTrainSet::with_alpha(vec![(0.1, ConfidentConsistent)], vec![1.0], 1.5).is_err());
        assert!(GmmTrainSet::with_alpha(vec![(0.1, ConfidentConsistent)], vec![], 0.0).is_err());
        assert!(GmmTrainSet::with_alpha(vec![(f64::NAN, ConfidentConsistent)], vec![], 1.0).is_err());
        let s = GmmTrainSet::new(vec![(0.1, ConfidentConsistent)], vec![1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(s.alpha, 0.25);
    }
}
