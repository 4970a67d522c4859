use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Objective, Sampler, TrainConfig, TuneConfig};
use super::data::Dataset;
use super::split::{stratified_kfold, Fold};
use super::train::{evaluate_items, train_model, TrainOptions};
use crate::error::{Error, Result};
use crate::rftg::{classify_value, Strength, Thresholds, THRESHOLD_GAP};
use crate::rng::stream;

pub const TAU1_RANGE: (f64, f64) = (0.05, 0.45);
pub const TAU2_MAX: f64 = 0.60;

const TRIAL_TAG: u64 = 0x7e_01;
const INNER_TAG: u64 = 0x1a_3c;
const MAX_REJECTIONS: usize = 10_000;
/// Multiplier on Scott's-rule kernel widths.
const BANDWIDTH_SCALE: f64 = 0.2;
const MIN_BANDWIDTH: f64 = 0.01;

pub fn feasible(tau1: f64, tau2: f64) -> bool {
    (TAU1_RANGE.0..=TAU1_RANGE.1).contains(&tau1) && tau2 >= tau1 + THRESHOLD_GAP && tau2 <= TAU2_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub outer_fold: usize,
    pub trial: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub inner: Vec<f64>,
    pub objective: f64,
    pub status: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldChoice {
    pub test_site: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub choices: Vec<FoldChoice>,
    pub trials: Vec<TrialRecord>,
}

impl TuneResult {
    pub fn trials_csv(&self) -> String {
        let inner = self.trials.iter().map(|t| t.inner.len()).max().unwrap_or(0);
        let mut out = String::from("outer_fold,trial,tau1,tau2,objective");
        for k in 0..inner {
            out.push_str(&format!(",inner_{k}"));
        }
        out.push_str(",status\n");
        for t in &self.trials {
            out.push_str(&format!("{},{},{},{},{}", t.outer_fold, t.trial, t.tau1, t.tau2, t.objective));
            for k in 0..inner {
                match t.inner.get(k) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{}\n", t.status));
        }
        out
    }
}

/// Macro-averaged F1 over the three strength classes.
pub fn strength_macro_f1(truth: &[Strength], predicted: &[Strength]) -> f64 {
    let mut f1 = 0.0;
    for class in Strength::ALL {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == class, p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1 += 2.0 * tp as f64 / denom as f64;
        }
    }
    f1 / Strength::ALL.len() as f64
}

/// Macro-F1 of strengths discretized from observed ΔBOLD at `th` against
/// the planted ground-truth strengths of the same subjects.
pub fn roi_macro_f1(ds: &Dataset, subjects: &[usize], th: &Thresholds) -> Result<f64> {
    let (t1, t2) = ds.spec.truth_thresholds;
    let truth_th = Thresholds::new(t1, t2)?;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for &i in subjects {
        let s = &ds.subjects[i];
        truth.extend(s.clean_delta_bold.iter().map(|&v| classify_value(v, &truth_th).0));
        pred.extend(s.delta_bold.iter().map(|&v| classify_value(v, th).0));
    }
    if truth.is_empty() {
        return Err(Error::invalid("roi_macro_f1", "no subjects to score"));
    }
    Ok(strength_macro_f1(&truth, &pred))
}

fn sample_uniform(rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    for _ in 0..MAX_REJECTIONS {
        let t1 = rng.gen_range(TAU1_RANGE.0..=TAU1_RANGE.1);
        let t2 = rng.gen_range(TAU1_RANGE.0 + THRESHOLD_GAP..=TAU2_MAX);
        if feasible(t1, t2) {
            return Ok((t1, t2));
        }
    }
    Err(Error::invalid("tune_thresholds", "could not draw a feasible threshold pair"))
}

/// Product of per-axis Gaussian kernels centred on `points`.
struct Kde {
    points: Vec<(f64, f64)>,
    bw: (f64, f64),
}

impl Kde {
    fn fit(points: Vec<(f64, f64)>) -> Self {
        let n = points.len() as f64;
        let sd = |f: fn(&(f64, f64)) -> f64| {
            let m = points.iter().map(f).sum::<f64>() / n;
            (points.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        let scale = BANDWIDTH_SCALE * n.powf(-1.0 / 6.0);
        let bw = ((sd(|p| p.0) * scale).max(MIN_BANDWIDTH), (sd(|p| p.1) * scale).max(MIN_BANDWIDTH));
        Self { points, bw }
    }

    fn density(&self, x: (f64, f64)) -> f64 {
        let s = self
            .points
            .iter()
            .map(|p| {
                let a = (x.0 - p.0) / self.bw.0;
                let b = (x.1 - p.1) / self.bw.1;
                (-0.5 * (a * a + b * b)).exp()
            })
            .sum::<f64>();
        s / (self.points.len() as f64 * self.bw.0 * self.bw.1) + f64::MIN_POSITIVE
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
        let n0 = Normal::new(0.0, self.bw.0).ok()?;
        let n1 = Normal::new(0.0, self.bw.1).ok()?;
        for _ in 0..100 {
            let c = self.points[rng.gen_range(0..self.points.len())];
            let x = (c.0 + n0.sample(rng), c.1 + n1.sample(rng));
            if feasible(x.0, x.1) {
                return Some(x);
            }
        }
        None
    }
}

/// History entries ordered best first; ties keep the earlier trial first.
fn ranked(history: &[(f64, f64, f64)]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..history.len()).collect();
    idx.sort_by(|&a, &b| history[b].2.total_cmp(&history[a].2).then(a.cmp(&b)));
    idx.into_iter().map(|i| (history[i].0, history[i].1)).collect()
}

/// Next candidate pair. History holds `(τ1, τ2, objective)`.
pub fn propose(history: &[(f64, f64, f64)], cfg: &TuneConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if cfg.sampler == Sampler::Uniform || history.len() < cfg.startup_trials.max(2) {
        return sample_uniform(rng);
    }
    let order = ranked(history);
    let n_good = order.len().div_ceil(2);
    let good = Kde::fit(order[..n_good].to_vec());
    let bad = Kde::fit(order[n_good..].to_vec());
    let mut best: Option<((f64, f64), f64)> = None;
    for _ in 0..cfg.candidates.max(1) {
        let Some(x) = good.sample(rng) else { continue };
        let score = good.density(x) / bad.density(x);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((x, score));
        }
    }
    match best {
        Some((x, _)) => Ok(x),
        None => sample_uniform(rng),
    }
}

/// Runs `cfg.trials` proposals against `objective` and returns every trial.
pub fn search<F>(cfg: &TuneConfig, seed: u64, outer_fold: usize, mut objective: F) -> Result<Vec<TrialRecord>>
where
    F: FnMut(&Thresholds) -> Result<Vec<f64>>,
{
    let mut history = Vec::with_capacity(cfg.trials);
    let mut records = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = stream(seed, &[TRIAL_TAG, outer_fold as u64, trial as u64]);
        let (t1, t2) = propose(&history, cfg, &mut rng)?;
        let th = Thresholds::new(t1, t2)?;
        let (inner, status) = match objective(&th) {
            Ok(v) => (v, "complete"),
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => (Vec::new(), "failed"),
            Err(e) => return Err(e),
        };
        let mean = if inner.is_empty() {
            f64::NEG_INFINITY
        } else {
            inner.iter().sum::<f64>() / inner.len() as f64
        };
        history.push((t1, t2, if mean.is_finite() { mean } else { f64::MIN }));
        records.push(TrialRecord {
            outer_fold,
            trial,
            tau1: t1,
            tau2: t2,
            inner,
            objective: mean,
            status: status.into(),
        });
    }
    Ok(records)
}

/// Best complete trial; the earliest wins ties.
pub fn best_trial(records: &[TrialRecord]) -> Option<&TrialRecord> {
    records
        .iter()
        .filter(|r| r.status == "complete")
        .fold(None, |best: Option<&TrialRecord>, r| match best {
            Some(b) if b.objective >= r.objective => Some(b),
            _ => Some(r),
        })
}

/// Nested threshold search: per outer fold, inner stratified folds of the
/// development subjects score each sampled pair. Test-site subjects are
/// never touched.
pub fn tune_thresholds(ds: &Dataset, outer: &[Fold], train_cfg: &TrainConfig, cfg: &TuneConfig) -> Result<TuneResult> {
    let labels = ds.labels();
    let mut choices = Vec::with_capacity(outer.len());
    let mut trials = Vec::new();
    for (k, fold) in outer.iter().enumerate() {
        let dev = fold.development();
        let inner = stratified_kfold(&dev, &labels, cfg.inner_folds, train_cfg.seed, INNER_TAG ^ fold.test_site as u64)?;
        let objective = |th: &Thresholds| -> Result<Vec<f64>> {
            inner
                .iter()
                .enumerate()
                .map(|(j, (tr, held))| match cfg.objective {
                    Objective::RoiMacroF1 => roi_macro_f1(ds, held, th),
                    Objective::TaskAccuracy => {
                        let f = Fold {
                            test_site: fold.test_site,
                            train: tr.clone(),
                            val: held.clone(),
                            test: Vec::new(),
                        };
                        let short = TrainConfig {
                            max_epochs: cfg.short_epochs,
                            warmup_epochs: train_cfg.warmup_epochs.min(cfg.short_epochs.saturating_sub(1)),
                            seed: crate::rng::derive_seed(train_cfg.seed, &[INNER_TAG, k as u64, j as u64]),
                            ..*train_cfg
                        };
                        let opts = TrainOptions {
                            fixed_budget: true,
                            ..TrainOptions::default()
                        };
                        let out = train_model(ds, &f, &short, *th, &opts)?;
                        let items = super::data::encode(ds, held, &out.normalizer, &out.model.embedder)?;
                        Ok(evaluate_items(&out.model, &out.params, &items, &short)?.acc)
                    }
                })
                .collect()
        };
        let records = search(cfg, train_cfg.seed, k, objective)?;
        let best = best_trial(&records)
            .ok_or_else(|| Error::invalid("tune_thresholds", format!("every trial failed on outer fold {k}")))?;
        choices.push(FoldChoice {
            test_site: fold.test_site,
            tau1: best.tau1,
            tau2: best.tau2,
            objective: best.objective,
        });
        trials.extend(records);
    }
    Ok(TuneResult { choices, trials })
}
