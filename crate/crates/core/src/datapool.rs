//! Source / target data pools and the simulated labeling oracle.
//!
//! A [`DataPool`] holds every sample of one experiment together with its
//! hidden ground-truth label. Samples live in exactly one of three sets:
//! labeled source, labeled target and unlabeled target. Target labels are
//! revealed only through [`DataPool::oracle_label`] and moved into the
//! labeled target set by [`DataPool::annotate_batch`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> &'static str {
        match self {
            Domain::Source => "S",
            Domain::Target => "T",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub x: Vec<f64>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Membership {
    SourceLabeled,
    TargetLabeled,
    TargetUnlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    n_classes: usize,
    d_in: usize,
    samples: Vec<Sample>,
    truth: Vec<usize>,
    index: HashMap<SampleId, usize>,
    membership: Vec<Membership>,
    source: Vec<usize>,
    target_labeled: Vec<usize>,
    target_unlabeled: Vec<usize>,
}

impl DataPool {
    /// Builds a pool from `(sample, label)` records. Source samples start
    /// labeled, target samples start unlabeled.
    pub fn new(n_classes: usize, d_in: usize, records: Vec<(Sample, usize)>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidConfig("class count must be positive".into()));
        }
        if d_in == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        let mut samples = Vec::with_capacity(records.len());
        let mut truth = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        let mut membership = Vec::with_capacity(records.len());
        let mut source = Vec::new();
        let mut target_unlabeled = Vec::new();
        let mut source_classes = vec![false; n_classes];

        for (i, (sample, label)) in records.into_iter().enumerate() {
            if sample.x.len() != d_in {
                return Err(Error::DimensionMismatch {
                    expected: d_in,
                    actual: sample.x.len(),
                });
            }
            if !sample.x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            if label >= n_classes {
                return Err(Error::ClassOutOfRange {
                    class: label,
                    n_classes,
                });
            }
            if index.insert(sample.id, i).is_some() {
                return Err(Error::DuplicateSample(sample.id));
            }
            match sample.domain {
                Domain::Source => {
                    source_classes[label] = true;
                    source.push(i);
                    membership.push(Membership::SourceLabeled);
                }
                Domain::Target => {
                    target_unlabeled.push(i);
                    membership.push(Membership::TargetUnlabeled);
                }
            }
            samples.push(sample);
            truth.push(label);
        }
        if let Some(missing) = source_classes.iter().position(|&seen| !seen) {
            return Err(Error::MissingClass(missing));
        }
        Ok(Self {
            n_classes,
            d_in,
            samples,
            truth,
            index,
            membership,
            source,
            target_labeled: Vec::new(),
            target_unlabeled,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Total number of samples across all three sets.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: SampleId) -> Option<&Sample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    pub fn source_labeled(&self) -> impl ExactSizeIterator<Item = (&Sample, usize)> + '_ {
        self.source.iter().map(|&i| (&self.samples[i], self.truth[i]))
    }

    pub fn target_labeled(&self) -> impl ExactSizeIterator<Item = (&Sample, usize)> + '_ {
        self.target_labeled
            .iter()
            .map(|&i| (&self.samples[i], self.truth[i]))
    }

    pub fn target_unlabeled(&self) -> impl ExactSizeIterator<Item = &Sample> + '_ {
        self.target_unlabeled.iter().map(|&i| &self.samples[i])
    }

    /// Labeled source followed by labeled target samples.
    pub fn labeled(&self) -> impl Iterator<Item = (&Sample, usize)> + '_ {
        self.source_labeled().chain(self.target_labeled())
    }

    pub fn n_source(&self) -> usize {
        self.source.len()
    }

    pub fn n_target_labeled(&self) -> usize {
        self.target_labeled.len()
    }

    pub fn n_target_unlabeled(&self) -> usize {
        self.target_unlabeled.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_labeled.len() + self.target_unlabeled.len()
    }

    /// Returns the hidden label of an unlabeled target sample. Never mutates
    /// the pool.
    pub fn oracle_label(&self, id: SampleId) -> Result<usize> {
        let &i = self.index.get(&id).ok_or(Error::UnknownSample(id))?;
        if self.membership[i] != Membership::TargetUnlabeled {
            return Err(Error::NotUnlabeled(id));
        }
        Ok(self.truth[i])
    }

    /// Moves `ids` from the unlabeled to the labeled target set. The pool is
    /// left untouched if any id is rejected.
    pub fn annotate_batch(&mut self, ids: &[SampleId]) -> Result<()> {
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateSample(id));
            }
            self.oracle_label(id)?;
        }
        for &id in ids {
            let i = self.index[&id];
            self.membership[i] = Membership::TargetLabeled;
            self.target_labeled.push(i);
        }
        let membership = &self.membership;
        self.target_unlabeled
            .retain(|&i| membership[i] == Membership::TargetUnlabeled);
        Ok(())
    }

    /// Every target sample (labeled or not) with its ground-truth label.
    /// Reserved for evaluation and diagnostics.
    pub(crate) fn target_ground_truth(&self) -> impl Iterator<Item = (&Sample, usize)> + '_ {
        self.target_labeled
            .iter()
            .chain(&self.target_unlabeled)
            .map(|&i| (&self.samples[i], self.truth[i]))
    }

    pub(crate) fn hidden_label(&self, id: SampleId) -> Option<usize> {
        self.index.get(&id).map(|&i| self.truth[i])
    }

    /// Reads the delimited dataset format: a `d_in,C` header followed by one
    /// `id,domain,label,f_0,...` line per sample.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(n, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((n + 1, other)),
        });
        let (line_no, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let header = header.map_err(|e| Error::io("<dataset>", e))?;
        let dims: Vec<&str> = header.split(',').map(str::trim).collect();
        if dims.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected header `d_in,C`, got `{header}`"),
            });
        }
        let parse_usize = |s: &str, line: usize| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("`{s}`: {e}"),
            })
        };
        let d_in = parse_usize(dims[0], line_no)?;
        let n_classes = parse_usize(dims[1], line_no)?;

        let mut records = Vec::new();
        for (line_no, line) in lines {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 + d_in {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, got {}", 3 + d_in, fields.len()),
                });
            }
            let id = fields[0].parse::<u64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("id `{}`: {e}", fields[0]),
            })?;
            let domain = match fields[1] {
                "S" => Domain::Source,
                "T" => Domain::Target,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("domain must be S or T, got `{other}`"),
                    })
                }
            };
            let label = parse_usize(fields[2], line_no)?;
            let x = fields[3..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        line: line_no,
                        message: format!("feature `{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            records.push((
                Sample {
                    id: SampleId(id),
                    x,
                    domain,
                },
                label,
            ));
        }
        Self::new(n_classes, d_in, records)
    }

    /// Writes every sample in the delimited dataset format, in insertion
    /// order. Pool membership is not persisted.
    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{},{}", self.d_in, self.n_classes)?;
        for (sample, label) in self.samples.iter().zip(&self.truth) {
            write!(out, "{},{},{}", sample.id, sample.domain.tag(), label)?;
            for v in &sample.x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Translation,
    CovarianceScale,
    Mixed,
}

/// Synthetic dataset recipe. Class-conditional Gaussians in `d_in`
/// dimensions; the target domain applies `shift_kind` with strength
/// `shift_magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub n_classes: usize,
    pub d_in: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub shift_kind: ShiftKind,
    pub shift_magnitude: f64,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    /// Per-coordinate standard deviation of each class cloud.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            d_in: 8,
            n_source: 500,
            n_target: 2000,
            shift_kind: ShiftKind::Rotation,
            shift_magnitude: 0.5,
            class_separation: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        if self.n_source == 0 || self.n_target == 0 {
            return bad("n_source and n_target must be positive");
        }
        if self.n_source < self.n_classes {
            return bad("n_source must be at least n_classes so every class is represented");
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return bad("shift_magnitude must be finite and non-negative");
        }
        if !(self.class_separation.is_finite() && self.noise_std >= 0.0 && self.noise_std.is_finite())
        {
            return bad("class_separation and noise_std must be finite, noise_std non-negative");
        }
        Ok(())
    }
}

/// Dense square matrix, row-major.
struct Square {
    n: usize,
    a: Vec<f64>,
}

impl Square {
    fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        Self { n, a }
    }

    fn mul(&self, other: &Square) -> Square {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let v = self.a[i * n + k];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[i * n + j] += v * other.a[k * n + j];
                }
            }
        }
        Square { n, a }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum())
            .collect()
    }

    /// Matrix exponential by scaling and squaring with a Taylor core.
    fn exp(&self) -> Square {
        let norm: f64 = self.a.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        let squarings = norm.log2().ceil().max(0.0) as u32 + 1;
        let scale = 0.5f64.powi(squarings as i32);
        let scaled = Square {
            n: self.n,
            a: self.a.iter().map(|v| v * scale).collect(),
        };
        let mut result = Square::identity(self.n);
        let mut term = Square::identity(self.n);
        for j in 1..=24 {
            term = term.mul(&scaled);
            for v in &mut term.a {
                *v /= j as f64;
            }
            for (r, t) in result.a.iter_mut().zip(&term.a) {
                *r += t;
            }
        }
        for _ in 0..squarings {
            result = result.mul(&result);
        }
        result
    }
}

/// Random rotation `exp(magnitude * S)` for a skew-symmetric `S` whose
/// entries are scaled by `1/sqrt(d)`; identity at magnitude zero.
fn random_rotation(d: usize, magnitude: f64, rng: &mut crate::math::Rng) -> Square {
    let mut skew = Square {
        n: d,
        a: vec![0.0; d * d],
    };
    let scale = magnitude / (d as f64).sqrt();
    for i in 0..d {
        for j in (i + 1)..d {
            let v: f64 = rng.sample(StandardNormal);
            skew.a[i * d + j] = v * scale;
            skew.a[j * d + i] = -v * scale;
        }
    }
    skew.exp()
}

fn random_unit(d: usize, rng: &mut crate::math::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a source/target dataset from class-conditional Gaussians. Class
/// means sit on the scaled simplex `class_separation * e_c` (random unit
/// directions when there are more classes than dimensions). Labels are
/// balanced round-robin and then shuffled.
///
/// The generator parameters (means, rotation, offset) are drawn first from
/// the seed, so configs differing only in shift magnitude share them.
pub fn generate_shifted_dataset(cfg: &ShiftConfig) -> Result<DataPool> {
    cfg.validate()?;
    let d = cfg.d_in;
    let mut param_rng = rng_from_seed(cfg.seed);

    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| {
            if cfg.n_classes <= d {
                let mut m = vec![0.0; d];
                m[c] = cfg.class_separation;
                m
            } else {
                random_unit(d, &mut param_rng)
                    .into_iter()
                    .map(|v| v * cfg.class_separation)
                    .collect()
            }
        })
        .collect();

    let (rotation_mag, translation_mag, scale_mag) = match cfg.shift_kind {
        ShiftKind::Rotation => (cfg.shift_magnitude, 0.0, 0.0),
        ShiftKind::Translation => (0.0, cfg.shift_magnitude, 0.0),
        ShiftKind::CovarianceScale => (0.0, 0.0, cfg.shift_magnitude),
        ShiftKind::Mixed => (cfg.shift_magnitude, cfg.shift_magnitude, cfg.shift_magnitude),
    };
    // Always consume the same draws so the stream does not depend on the kind.
    let rotation = random_rotation(d, rotation_mag, &mut param_rng);
    let offset: Vec<f64> = random_unit(d, &mut param_rng)
        .into_iter()
        .map(|v| v * translation_mag * cfg.class_separation)
        .collect();
    let spread = 1.0 + scale_mag;

    let mut sample_rng = rng_from_seed(cfg.seed ^ 0x5eed_da7a_5eed_da7a);
    let draw_labels = |n: usize, rng: &mut crate::math::Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
        labels.shuffle(rng);
        labels
    };
    let source_labels = draw_labels(cfg.n_source, &mut sample_rng);
    let target_labels = draw_labels(cfg.n_target, &mut sample_rng);

    let mut records = Vec::with_capacity(cfg.n_source + cfg.n_target);
    let mut next_id = 0u64;
    for label in source_labels {
        let x: Vec<f64> = means[label]
            .iter()
            .map(|&m| m + cfg.noise_std * sample_rng.sample::<f64, _>(StandardNormal))
            .collect();
        records.push((
            Sample {
                id: SampleId(next_id),
                x,
                domain: Domain::Source,
            },
            label,
        ));
        next_id += 1;
    }
    for label in target_labels {
        let noise: Vec<f64> = (0..d)
            .map(|_| spread * cfg.noise_std * sample_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let raw: Vec<f64> = means[label].iter().zip(&noise).map(|(m, n)| m + n).collect();
        let x: Vec<f64> = rotation
            .apply(&raw)
            .into_iter()
            .zip(&offset)
            .map(|(v, o)| v + o)
            .collect();
        records.push((
            Sample {
                id: SampleId(next_id),
                x,
                domain: Domain::Target,
            },
            label,
        ));
        next_id += 1;
    }
    DataPool::new(cfg.n_classes, d, records)
}

/// Standard normal draw helper for other modules.
pub(crate) fn standard_normal(rng: &mut crate::math::Rng) -> f64 {
    StandardNormal.sample(rng)
}
