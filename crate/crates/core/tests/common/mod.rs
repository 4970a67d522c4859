//! Helpers shared by the integration tests: random fixtures, parameter
//! binding for finite-difference checks, and straight-line reference
//! implementations written without the library's graph machinery.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtgmff::numcore::{Bound, Graph, ParamGroup, ParamStore, Tensor, Var};
use rtgmff::rftg::{roi_name, Polarity, Strength, Thresholds};
use rtgmff::N_ROIS;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, scale)).unwrap()
}

/// Adds uniform noise to every trainable parameter so checks do not run at
/// special initial values (zero FiLM weights, identity splits).
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, p) in store.iter_mut() {
        if p.group != ParamGroup::Buffer {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
        }
    }
}

/// Trainable parameters as named leaves, in store order.
pub fn leaves(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Buffer)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Binds the store with trainable parameters taken from `vars` (as produced
/// for [`leaves`]) and buffers as constants.
pub fn bind_leaves(g: &mut Graph, store: &ParamStore, vars: &[Var]) -> Bound {
    let mut next = 0;
    let mut all = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        if p.group == ParamGroup::Buffer {
            all.push(g.constant(p.value.clone()));
        } else {
            all.push(vars[next]);
            next += 1;
        }
    }
    Bound::from_vars(all)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_thresholds(rng: &mut ChaCha8Rng) -> Thresholds {
    let tau1 = rng.gen_range(0.05..0.45);
    let tau2 = rng.gen_range(tau1 + 0.02..=0.60);
    Thresholds::new(tau1, tau2).unwrap()
}

/// ΔBOLD-like vector that also hits both thresholds and zero exactly.
pub fn random_delta_bold(rng: &mut ChaCha8Rng, th: &Thresholds) -> Vec<f64> {
    (0..N_ROIS)
        .map(|i| match i % 29 {
            0 => th.tau1,
            1 => -th.tau2,
            2 => 0.0,
            3 => -th.tau1,
            _ => rng.gen_range(-0.7..0.7),
        })
        .collect()
}

pub fn discretize_reference(v: f64, tau1: f64, tau2: f64) -> (Strength, Polarity) {
    let polarity = if v < 0.0 { Polarity::Down } else { Polarity::Up };
    let m = if v < 0.0 { -v } else { v };
    if m >= tau2 {
        (Strength::Strong, polarity)
    } else if m < tau1 {
        (Strength::Weak, polarity)
    } else {
        (Strength::Moderate, polarity)
    }
}

/// Row-major `[rows, cols]` matrix product.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i * inner + k] * b[k * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

/// One batch entry: `q: [lq, d]`, `f: [lk, d]`, `w_k, w_v: [d, d]`. Each
/// attention row is computed on its own.
pub fn cross_attention_reference(q: &[f64], f: &[f64], w_k: &[f64], w_v: &[f64], lq: usize, lk: usize, d: usize) -> Vec<f64> {
    let k = matmul(f, w_k, lk, d, d);
    let v = matmul(f, w_v, lk, d, d);
    let mut out = vec![0.0; lq * d];
    for i in 0..lq {
        let scores: Vec<f64> = (0..lk)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..d {
            out[i * d + c] = (0..lk).map(|j| w[j] / z * v[j * d + c]).sum();
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `1 − mean cos` over row pairs of `[n, d]` matrices.
pub fn align_reference(u: &[f64], t: &[f64], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        total += cosine(&u[i * d..(i + 1) * d], &t[i * d..(i + 1) * d]);
    }
    1.0 - total / n as f64
}

fn gram(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in 0..cols {
            g[a * cols + b] = (0..rows).map(|r| w[r * cols + a] * w[r * cols + b]).sum();
        }
    }
    g
}

/// Squared Frobenius distance between the column Gram matrices.
pub fn reg_reference(w_z: &[f64], rows_z: usize, w_t: &[f64], rows_t: usize, cols: usize) -> f64 {
    let gz = gram(w_z, rows_z, cols);
    let gt = gram(w_t, rows_t, cols);
    gz.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean softmax cross-entropy of `[n, 2]` logits.
pub fn ce_reference(logits: &[f64], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - logits[2 * i + y];
    }
    total / labels.len() as f64
}

/// Fraction of patient/control pairs ranked correctly, ties counting half.
pub fn auc_pairwise(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Kendall's W with ranks from direct counting.
pub fn kendall_w_reference(series: &[f64], voxels: usize, timepoints: usize) -> f64 {
    let mut rank_sums = vec![0.0; timepoints];
    let mut tie_term = 0.0;
    for v in 0..voxels {
        let row = &series[v * timepoints..(v + 1) * timepoints];
        for (t, &x) in row.iter().enumerate() {
            let below = row.iter().filter(|&&y| y < x).count() as f64;
            let equal = row.iter().filter(|&&y| y == x).count() as f64;
            rank_sums[t] += below + (equal + 1.0) / 2.0;
        }
        let mut seen: Vec<f64> = Vec::new();
        for &x in row {
            if !seen.contains(&x) {
                seen.push(x);
                let c = row.iter().filter(|&&y| y == x).count() as f64;
                tie_term += c * c * c - c;
            }
        }
    }
    let (m, n) = (voxels as f64, timepoints as f64);
    let mean = rank_sums.iter().sum::<f64>() / n;
    let s: f64 = rank_sums.iter().map(|r| (r - mean).powi(2)).sum();
    12.0 * s / (m * m * (n.powi(3) - n) - m * tie_term)
}

pub fn fixture_values() -> Vec<f64> {
    (0..N_ROIS).map(|i| 0.5 * (i as f64 * 0.731).sin()).collect()
}

/// The report written out line by line, independent of the template engine.
pub fn expected_report(v: &[f64], th: &Thresholds, age: u64, noun: &str) -> String {
    let mut out = format!("This {age}-year-old {noun} presents the following regional activity profile.\n");
    for (i, &x) in v.iter().enumerate() {
        let strength = if x.abs() >= th.tau2 {
            "strong"
        } else if x.abs() >= th.tau1 {
            "moderate"
        } else {
            "weak"
        };
        let kind = if x < 0.0 { "de-activation" } else { "activation" };
        out.push_str(&format!("The {} shows {strength} {kind}.\n", roi_name(i).unwrap()));
    }
    out
}
