use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::checkpoint::{params_checkpoint, training_checkpoint, Checkpoint, CheckpointMeta, EpochRecord};
use super::config::TrainConfig;
use super::data::{encode, make_batch, Dataset, Encoded, Normalizer};
use super::metrics::{evaluate_scores, Metrics};
use super::split::Fold;
use crate::asam::LossWeights;
use crate::error::{Error, Result};
use crate::model::{patient_probabilities, Model};
use crate::numcore::{adamw_step, AdamWConfig, BnMode, Graph, GroupHyper, LrSchedule, OptimState, ParamGroup, ParamStore};
use crate::rftg::Thresholds;
use crate::rng::stream;

const SHUFFLE_TAG: u64 = 0x5f_0f;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written after every epoch so an interrupted run can resume.
    pub state_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Fixed-budget training: run all epochs and keep the final parameters.
    pub fixed_budget: bool,
    /// Return after this epoch as if interrupted.
    pub stop_after_epoch: Option<usize>,
}

/// Which subjects fed each statistic fitted during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainAudit {
    pub age_stat_subjects: Vec<String>,
    pub batch_stat_subjects: BTreeSet<String>,
    pub gradient_subjects: BTreeSet<String>,
    pub selection_subjects: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    pub meta: CheckpointMeta,
    pub audit: TrainAudit,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        params_checkpoint(cfg.digest(), self.meta.clone(), &self.params)
    }
}

fn optimizer(store: &ParamStore, cfg: &TrainConfig) -> OptimState {
    let groups = BTreeMap::from([
        (
            ParamGroup::Backbone,
            GroupHyper {
                lr: cfg.backbone_lr,
                weight_decay: cfg.weight_decay,
            },
        ),
        (
            ParamGroup::Head,
            GroupHyper {
                lr: cfg.head_lr,
                weight_decay: cfg.weight_decay,
            },
        ),
    ]);
    OptimState::new(store, AdamWConfig::default(), groups)
}

/// Mean loss and patient-class probabilities in inference mode.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    items: &[Encoded],
    batch_size: usize,
    weights: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let (mut total, mut probs) = (0.0, Vec::with_capacity(items.len()));
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = make_batch(&chunk.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (terms, out) = model.loss(&mut g, &p, &batch, weights, BnMode::Eval)?;
        total += g.value(terms.total).item() * chunk.len() as f64;
        probs.extend(patient_probabilities(g.value(out.logits)));
    }
    Ok((total / items.len() as f64, probs))
}

pub fn evaluate_items(model: &Model, store: &ParamStore, items: &[Encoded], cfg: &TrainConfig) -> Result<Metrics> {
    let (_, probs) = predict(model, store, items, cfg.batch_size, cfg.loss_weights())?;
    let labels: Vec<usize> = items.iter().map(|e| e.label).collect();
    evaluate_scores(&probs, &labels)
}

/// Trains on `fold.train`, selecting the epoch with the lowest validation
/// loss on `fold.val`. The first `freeze_backbone_epochs` epochs update the
/// head only, with batch-norm layers in inference mode.
pub fn train_model(ds: &Dataset, fold: &Fold, cfg: &TrainConfig, thresholds: Thresholds, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    thresholds.validate()?;
    if fold.train.is_empty() {
        return Err(Error::invalid("train_model", format!("fold {} has no training subjects", fold.test_site)));
    }
    if !opts.fixed_budget && fold.val.is_empty() {
        return Err(Error::invalid(
            "train_model",
            format!("fold {} has no validation subjects for early stopping", fold.test_site),
        ));
    }
    if (ds.height, ds.width) != (cfg.model.height, cfg.model.width) {
        return Err(Error::invalid(
            "train_model",
            format!(
                "feature maps are {}x{} but the model expects {}x{}",
                ds.height, ds.width, cfg.model.height, cfg.model.width
            ),
        ));
    }
    let normalizer = Normalizer::fit(ds, &fold.train, thresholds)?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, cfg.seed)?;
    let train_items = encode(ds, &fold.train, &normalizer, &model.embedder)?;
    let val_items = encode(ds, &fold.val, &normalizer, &model.embedder)?;
    let weights = cfg.loss_weights();
    let schedule = LrSchedule::new(1.0, cfg.warmup_epochs, cfg.max_epochs)?;
    let mut opt = optimizer(&store, cfg);

    let mut meta = CheckpointMeta {
        test_site: fold.test_site,
        epoch: 0,
        best_epoch: 0,
        best_val_loss: None,
        bad_epochs: 0,
        stopped: false,
        age_mean: normalizer.age_mean,
        age_std: normalizer.age_std,
        tau1: thresholds.tau1,
        tau2: thresholds.tau2,
        history: Vec::new(),
    };
    let mut best = store.clone();
    let mut audit = TrainAudit {
        age_stat_subjects: normalizer.fitted_on.clone(),
        ..TrainAudit::default()
    };
    if let Some(ck) = &opts.resume {
        if ck.config_digest != cfg.digest() {
            return Err(Error::invalid("resume", "checkpoint was written under a different configuration"));
        }
        if ck.meta.test_site != fold.test_site {
            return Err(Error::invalid(
                "resume",
                format!("checkpoint belongs to site {}, not {}", ck.meta.test_site, fold.test_site),
            ));
        }
        ck.restore_params(&mut store)?;
        ck.restore_best(&mut best)?;
        ck.restore_optimizer(&store, &mut opt)?;
        meta = ck.meta.clone();
        for r in &meta.history {
            audit.gradient_subjects.extend(ds.ids(&fold.train));
            if !r.backbone_frozen {
                audit.batch_stat_subjects.extend(ds.ids(&fold.train));
            }
            if r.val_loss.is_some() {
                audit.selection_subjects.extend(ds.ids(&fold.val));
            }
        }
    }

    let mut epoch = meta.epoch + 1;
    while epoch <= cfg.max_epochs && !meta.stopped {
        let frozen = epoch <= cfg.freeze_backbone_epochs;
        let factor = schedule.factor(epoch)?;
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE_TAG, fold.test_site as u64, epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Encoded> = chunk.iter().map(|&i| &train_items[i]).collect();
            let batch = make_batch(&items)?;
            let diverged = |e: Error| Error::Diverged {
                epoch,
                batch: bi,
                msg: e.to_string(),
            };
            let mut g = Graph::new();
            let p = store.bind(&mut g, |grp| grp == ParamGroup::Head || !frozen);
            let mode = if frozen { BnMode::Eval } else { BnMode::Train };
            let (terms, out) = model.loss(&mut g, &p, &batch, weights, mode).map_err(diverged)?;
            let loss = g.value(terms.total).item();
            if !loss.is_finite() {
                return Err(diverged(Error::NonFinite { op: "loss" }));
            }
            loss_sum += loss * chunk.len() as f64;
            let mut grads = g.backward(terms.total).map_err(diverged)?;
            let grads: Vec<_> = store.ids().map(|id| grads.take(p.var(id))).collect();
            adamw_step(&mut store, &grads, &mut opt, factor)?;
            let ids = items.iter().map(|e| ds.subjects[e.index].id.clone());
            if let Some(up) = out.bn_update {
                store.get_mut(up.mean).data_mut().copy_from_slice(&up.stats.mean);
                store.get_mut(up.var).data_mut().copy_from_slice(&up.stats.var);
                audit.batch_stat_subjects.extend(ids.clone());
            }
            audit.gradient_subjects.extend(ids);
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let (val_loss, val_acc) = if val_items.is_empty() {
            (None, None)
        } else {
            let (l, probs) = predict(&model, &store, &val_items, cfg.batch_size, weights)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    msg: "validation loss is not finite".into(),
                });
            }
            let labels: Vec<usize> = val_items.iter().map(|e| e.label).collect();
            audit.selection_subjects.extend(ds.ids(&fold.val));
            (Some(l), Some(evaluate_scores(&probs, &labels)?.acc))
        };
        meta.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr_factor: factor,
            backbone_frozen: frozen,
        });
        meta.epoch = epoch;
        if opts.fixed_budget {
            best.clone_from(&store);
            meta.best_epoch = epoch;
            meta.best_val_loss = val_loss;
        } else if let Some(l) = val_loss {
            if meta.best_val_loss.is_none_or(|b| l < b) {
                meta.best_val_loss = Some(l);
                meta.best_epoch = epoch;
                meta.bad_epochs = 0;
                best.clone_from(&store);
            } else {
                meta.bad_epochs += 1;
                meta.stopped = meta.bad_epochs >= cfg.early_stop_patience;
            }
        }
        if let Some(path) = &opts.state_path {
            training_checkpoint(cfg.digest(), meta.clone(), &store, &best, &opt).save(path)?;
        }
        if opts.stop_after_epoch == Some(epoch) {
            break;
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        model,
        params: best,
        normalizer,
        meta,
        audit,
    })
}
