use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{encode, subject_tokens, Dataset, Normalizer};
use super::metrics::{Metrics, Summary};
use super::split::{loso_split, Fold};
use super::train::{evaluate_items, train_model, TrainAudit, TrainOptions, TrainOutcome};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{grad_check, Bound, BnMode, GradCheckOpts, GradCheckReport, ParamStore, Tensor};
use crate::rftg::{discretize, render_report, Thresholds};
use crate::synthgen::CohortSpec;

pub const METRICS_FILE: &str = "metrics.json";
pub const TRIALS_FILE: &str = "trials.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn checkpoint_file(site: usize) -> String {
    format!("fold-{site}.ckpt")
}

pub fn state_file(site: usize) -> String {
    format!("fold-{site}.state.ckpt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_site: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

/// Verdict of the leakage audit for one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageAudit {
    pub test_site: usize,
    pub age_stats_match_train: bool,
    pub test_subjects_in_training_stats: usize,
}

impl LeakageAudit {
    pub fn clean(&self) -> bool {
        self.age_stats_match_train && self.test_subjects_in_training_stats == 0
    }
}

/// Recomputes the fold's age statistics from the training subjects alone and
/// checks that no held-out subject fed any training-time statistic.
pub fn audit_fold(ds: &Dataset, fold: &Fold, normalizer: &Normalizer, audit: &TrainAudit) -> Result<LeakageAudit> {
    let refit = Normalizer::fit(ds, &fold.train, normalizer.thresholds)?;
    let same = refit.age_mean.to_bits() == normalizer.age_mean.to_bits()
        && refit.age_std.to_bits() == normalizer.age_std.to_bits()
        && refit.fitted_on == audit.age_stat_subjects;
    let test_ids = ds.ids(&fold.test);
    let leaked = test_ids
        .iter()
        .filter(|id| {
            audit.age_stat_subjects.contains(id)
                || audit.batch_stat_subjects.contains(*id)
                || audit.gradient_subjects.contains(*id)
                || audit.selection_subjects.contains(*id)
        })
        .count();
    Ok(LeakageAudit {
        test_site: fold.test_site,
        age_stats_match_train: same,
        test_subjects_in_training_stats: leaked,
    })
}

/// Result of one trained and tested fold.
pub struct FoldRun {
    pub fold: Fold,
    pub outcome: TrainOutcome,
    pub report: FoldReport,
    pub audit: LeakageAudit,
}

pub fn run_fold(ds: &Dataset, fold: &Fold, cfg: &TrainConfig, th: Thresholds, opts: &TrainOptions) -> Result<FoldRun> {
    let outcome = train_model(ds, fold, cfg, th, opts)?;
    let items = encode(ds, &fold.test, &outcome.normalizer, &outcome.model.embedder)?;
    let metrics = evaluate_items(&outcome.model, &outcome.params, &items, cfg)?;
    let audit = audit_fold(ds, fold, &outcome.normalizer, &outcome.audit)?;
    let report = FoldReport {
        test_site: fold.test_site,
        n_train: fold.train.len(),
        n_val: fold.val.len(),
        n_test: fold.test.len(),
        tau1: th.tau1,
        tau2: th.tau2,
        best_epoch: outcome.meta.best_epoch,
        epochs_run: outcome.meta.epoch,
        best_val_loss: outcome.meta.best_val_loss,
        metrics,
    };
    Ok(FoldRun {
        fold: fold.clone(),
        outcome,
        report,
        audit,
    })
}

/// Per-site thresholds, falling back to the configured pair.
pub type ThresholdMap = BTreeMap<usize, Thresholds>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Leave-one-site-out training and testing. With `out`, writes
/// `metrics.json`, one best-epoch checkpoint per fold and resumable
/// per-epoch training state.
pub fn cross_validate(
    ds: &Dataset,
    cfg: &TrainConfig,
    thresholds: &ThresholdMap,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<(CvReport, Vec<FoldRun>)> {
    let folds = loso_split(&ds.sites(), &ds.labels(), cfg.seed)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    let runs = folds
        .par_iter()
        .map(|fold| {
            let th = match thresholds.get(&fold.test_site) {
                Some(t) => *t,
                None => cfg.thresholds()?,
            };
            let opts = TrainOptions {
                state_path: out.map(|d| d.join(state_file(fold.test_site))),
                resume: resume.filter(|c| c.meta.test_site == fold.test_site).cloned(),
                ..TrainOptions::default()
            };
            let run = run_fold(ds, fold, cfg, th, &opts)?;
            if let Some(dir) = out {
                run.outcome.checkpoint(cfg).save(&dir.join(checkpoint_file(fold.test_site)))?;
            }
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CvReport {
        folds: runs.iter().map(|r| r.report.clone()).collect(),
        summary: Summary::of(&runs.iter().map(|r| r.report.metrics).collect::<Vec<_>>()),
    };
    if let Some(dir) = out {
        write_json(&dir.join(METRICS_FILE), &report)?;
    }
    Ok((report, runs))
}

/// Evaluates a stored best-epoch checkpoint on its held-out site.
pub fn evaluate_checkpoint(ds: &Dataset, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Metrics> {
    if ck.config_digest != cfg.digest() {
        return Err(Error::invalid("eval", "checkpoint was written under a different configuration"));
    }
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, cfg.seed)?;
    ck.restore_params(&mut store)?;
    let norm = Normalizer {
        age_mean: ck.meta.age_mean,
        age_std: ck.meta.age_std,
        thresholds: Thresholds::new(ck.meta.tau1, ck.meta.tau2)?,
        fitted_on: Vec::new(),
    };
    let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.subjects[i].site == ck.meta.test_site).collect();
    if test.is_empty() {
        return Err(Error::invalid("eval", format!("cohort has no subjects at site {}", ck.meta.test_site)));
    }
    let items = encode(ds, &test, &norm, &model.embedder)?;
    evaluate_items(&model, &store, &items, cfg)
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    write_json(path, m)
}

pub fn write_thresholds(path: &Path, choices: &[super::tuner::FoldChoice]) -> Result<()> {
    write_json(path, &choices)
}

pub fn read_thresholds(path: &Path) -> Result<ThresholdMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let choices: Vec<super::tuner::FoldChoice> = serde_json::from_str(&text)?;
    choices
        .into_iter()
        .map(|c| Ok((c.test_site, Thresholds::new(c.tau1, c.tau2)?)))
        .collect()
}

/// Writes `<id>.report.txt` and `<id>.tokens.json` for every subject.
pub fn write_reports(ds: &Dataset, th: &Thresholds, dir: &Path) -> Result<usize> {
    ensure_dir(dir)?;
    for s in &ds.subjects {
        let triplets = discretize(&s.delta_bold, th)?;
        write_text(&dir.join(format!("{}.report.txt", s.id)), &render_report(&triplets, s.age_years, s.gender)?)?;
        let mut tokens = serde_json::to_string_pretty(&subject_tokens(s, th)?)?;
        tokens.push('\n');
        write_text(&dir.join(format!("{}.tokens.json", s.id)), &tokens)?;
    }
    Ok(ds.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub summary: Summary,
}

/// Cross-validated metrics for every (α, β) cell, α-major.
pub fn sweep_loss_weights(ds: &Dataset, cfg: &TrainConfig, alphas: &[f64], betas: &[f64], include_zero: bool) -> Result<Vec<SweepRow>> {
    let mut cells: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    if include_zero {
        cells.push((0.0, 0.0));
    }
    let th = ThresholdMap::new();
    cells
        .into_iter()
        .map(|(alpha, beta)| {
            let c = TrainConfig { alpha, beta, ..*cfg };
            let (report, _) = cross_validate(ds, &c, &th, None, None)?;
            Ok(SweepRow {
                alpha,
                beta,
                summary: report.summary,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("alpha,beta,acc_mean,acc_std,sen_mean,sen_std,spe_mean,spe_std,auc_mean,auc_std\n");
    for r in rows {
        let s = &r.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.alpha,
            r.beta,
            cell(s.acc.mean),
            cell(s.acc.std),
            cell(s.sen.mean),
            cell(s.sen.std),
            cell(s.spe.mean),
            cell(s.spe.std),
            cell(s.auc.mean),
            cell(s.auc.std)
        ));
    }
    out
}

/// Cohort of `n` subjects rendered on the toy canvas.
pub fn toy_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let cfg = ModelConfig::toy();
    let spec = CohortSpec {
        n_subjects: n,
        n_sites: 2,
        timepoints: 64,
        voxels: 3,
        seed,
        ..CohortSpec::default()
    };
    Dataset::generate(&spec, cfg.height, cfg.width)
}

/// Finite-difference check of the full training loss with respect to every
/// parameter of a toy model on `n` subjects.
pub fn full_model_grad_check(n: usize, seed: u64, opts: GradCheckOpts) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        model: ModelConfig::toy(),
        seed,
        ..TrainConfig::default()
    };
    let ds = toy_dataset(n, seed)?;
    let all: Vec<usize> = (0..n).collect();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, seed)?;
    let norm = Normalizer::fit(&ds, &all, cfg.thresholds()?)?;
    let items = encode(&ds, &all, &norm, &model.embedder)?;
    let batch = super::data::make_batch(&items.iter().collect::<Vec<_>>())?;
    let trainable: Vec<usize> = store
        .iter()
        .filter(|(_, p)| p.group != crate::numcore::ParamGroup::Buffer)
        .map(|(id, _)| id.index())
        .collect();
    let leaves: Vec<(String, Tensor)> = trainable
        .iter()
        .map(|&i| {
            let (_, p) = store.iter().nth(i).expect("index");
            (p.name.clone(), p.value.clone())
        })
        .collect();
    let weights = cfg.loss_weights();
    let build = |g: &mut crate::numcore::Graph, vars: &[crate::numcore::Var]| {
        let mut all_vars = Vec::with_capacity(store.len());
        let mut next = 0;
        for (_, p) in store.iter() {
            if p.group == crate::numcore::ParamGroup::Buffer {
                all_vars.push(g.constant(p.value.clone()));
            } else {
                all_vars.push(vars[next]);
                next += 1;
            }
        }
        let bound = Bound::from_vars(all_vars);
        let (terms, _) = model.loss(g, &bound, &batch, weights, BnMode::Train)?;
        Ok(terms.total)
    };
    grad_check(build, &leaves, opts)
}
