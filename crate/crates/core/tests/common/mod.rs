//! Direct-formula reference implementations used as test oracles. Nothing
//! here calls into the library's numeric code.
#![allow(dead_code)]

use std::collections::HashSet;

use ada_core::Classifier;

/// Plain network evaluation from the flattened `W_h, b_h, W_o, b_o` layout:
/// returns `(tanh features, softmax probabilities)`.
pub fn forward(model: &Classifier, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d_in, d_feat, c) = (model.d_in(), model.d_feat(), model.n_classes());
    let p = model.parameters();
    let w_h = &p[..d_feat * d_in];
    let b_h = &p[d_feat * d_in..d_feat * d_in + d_feat];
    let off = d_feat * d_in + d_feat;
    let w_o = &p[off..off + c * d_feat];
    let b_o = &p[off + c * d_feat..];

    let mut h = vec![0.0; d_feat];
    for j in 0..d_feat {
        let mut a = b_h[j];
        for i in 0..d_in {
            a += w_h[j * d_in + i] * x[i];
        }
        h[j] = a.tanh();
    }
    let mut z = vec![0.0; c];
    for k in 0..c {
        let mut a = b_o[k];
        for j in 0..d_feat {
            a += w_o[k * d_feat + j] * h[j];
        }
        z[k] = a;
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (h, e.iter().map(|v| v / s).collect())
}

/// First index of the maximum (strictly greater replaces).
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the k largest |v_i|, smaller index first on ties.
pub fn topk(v: &[f64], k: usize) -> HashSet<usize> {
    let mut out = HashSet::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in (0..v.len()).filter(|i| !out.contains(i)) {
            match best {
                Some(b) if v[i].abs() <= v[b].abs() => {}
                _ => best = Some(i),
            }
        }
        out.insert(best.unwrap());
    }
    out
}

pub fn iou(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

pub fn similarity_label(feature: &[f64], centroids: &[Vec<f64>], k: usize) -> usize {
    let f = topk(feature, k);
    let ious: Vec<f64> = centroids.iter().map(|a| iou(&f, &topk(a, k))).collect();
    first_argmax(&ious)
}

pub fn centroids(features: &[(Vec<f64>, usize)], n_classes: usize) -> Vec<Vec<f64>> {
    let d = features[0].0.len();
    let mut sum = vec![vec![0.0; d]; n_classes];
    let mut n = vec![0usize; n_classes];
    for (f, y) in features {
        n[*y] += 1;
        for j in 0..d {
            sum[*y][j] += f[j];
        }
    }
    sum.into_iter()
        .zip(n)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

/// Observation label as 1..=4 (CC, UC, UI, CI).
pub fn observation(probs: &[f64], y: usize, tau: f64) -> u8 {
    let pred = first_argmax(probs);
    let conf = probs[pred];
    if conf >= tau && y == pred {
        1
    } else if conf < tau && y == pred {
        2
    } else if conf < tau && y != pred {
        3
    } else {
        4
    }
}

/// Component posterior evaluated term by term in the linear domain.
pub fn posterior(score: f64, pi: &[f64; 4], mu: &[f64; 4], s2: &[f64; 4]) -> [f64; 4] {
    let mut t = [0.0; 4];
    for k in 0..4 {
        t[k] = pi[k] / (2.0 * std::f64::consts::PI * s2[k]).sqrt()
            * (-(score - mu[k]).powi(2) / (2.0 * s2[k])).exp();
    }
    let s: f64 = t.iter().sum();
    [t[0] / s, t[1] / s, t[2] / s, t[3] / s]
}

/// Top-b ids by descending key, ties to the smaller id, by repeated scan.
pub fn select_desc(keyed: &[(u64, f64)], b: usize) -> Vec<u64> {
    let mut taken: HashSet<u64> = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..b.min(keyed.len()) {
        let mut best: Option<(u64, f64)> = None;
        for &(id, v) in keyed {
            if taken.contains(&id) {
                continue;
            }
            best = match best {
                None => Some((id, v)),
                Some((bid, bv)) if v > bv || (v == bv && id < bid) => Some((id, v)),
                keep => keep,
            };
        }
        let (id, _) = best.unwrap();
        taken.insert(id);
        out.push(id);
    }
    out
}

/// Top-b ids by ascending key, ties to the smaller id.
pub fn select_asc(keyed: &[(u64, f64)], b: usize) -> Vec<u64> {
    let neg: Vec<(u64, f64)> = keyed.iter().map(|&(i, v)| (i, -v)).collect();
    select_desc(&neg, b)
}

pub fn binomial_tail_half(n: u32, at_least: u32) -> f64 {
    let mut p = 0.0;
    for i in at_least..=n {
        let mut c = 1.0;
        for j in 0..i {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        p += c / 2f64.powi(n as i32);
    }
    p
}
