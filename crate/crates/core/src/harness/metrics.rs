use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agreement required between the rank-statistic AUC and the ROC integral.
pub const AUC_AGREEMENT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Probability of ranking a random patient above a random control, with
/// half credit for ties.
pub fn auc_mann_whitney(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Count control-below-patient pairs group by group of tied scores.
    let (mut wins, mut negs_below) = (0.0, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count();
        let neg = (j - i) - pos;
        wins += pos as f64 * negs_below as f64 + 0.5 * (pos * neg) as f64;
        negs_below += neg;
        i = j;
    }
    Some(wins / (n_pos as f64 * n_neg as f64))
}

/// Trapezoidal area under the ROC curve traced by descending thresholds.
pub fn auc_trapezoid(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area2 = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let (tp0, fp0) = (tp, fp);
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        area2 += (fp - fp0) as f64 * (tp + tp0) as f64;
        i = j;
    }
    Some(area2 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Confusion metrics at probability 0.5 (ties go to the patient class) and
/// the rank AUC, cross-checked against the ROC integral.
pub fn evaluate_scores(probs: &[f64], labels: &[usize]) -> Result<Metrics> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("evaluate", &[probs.len()], &[labels.len()]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("evaluate", format!("label {l} outside {{0, 1}}")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= 0.5, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    let auc = auc_mann_whitney(probs, labels);
    if let (Some(a), Some(t)) = (auc, auc_trapezoid(probs, labels)) {
        if (a - t).abs() > AUC_AGREEMENT {
            return Err(Error::invalid("evaluate", format!("rank AUC {a} disagrees with ROC integral {t}")));
        }
    }
    let (sen, spe) = match (ratio(tp, fn_), ratio(tn, fp)) {
        (Some(s), Some(p)) => (Some(s), Some(p)),
        _ => (None, None),
    };
    Ok(Metrics {
        acc: (tp + tn) as f64 / probs.len() as f64,
        sen,
        spe,
        auc,
        tp,
        fp,
        tn,
        fn_,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Folds where the metric was defined.
    pub n: usize,
}

impl MeanStd {
    /// Mean and sample standard deviation over the defined values.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Self { mean: None, std: None, n: 0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            n: v.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: MeanStd,
    pub sen: MeanStd,
    pub spe: MeanStd,
    pub auc: MeanStd,
}

impl Summary {
    pub fn of(folds: &[Metrics]) -> Self {
        Self {
            acc: MeanStd::of(folds.iter().map(|m| Some(m.acc))),
            sen: MeanStd::of(folds.iter().map(|m| m.sen)),
            spe: MeanStd::of(folds.iter().map(|m| m.spe)),
            auc: MeanStd::of(folds.iter().map(|m| m.auc)),
        }
    }
}
