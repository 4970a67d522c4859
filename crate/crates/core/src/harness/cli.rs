use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::{Objective, RunConfig, Sampler};
use super::data::Dataset;
use super::pipeline::{
    cross_validate, ensure_dir, evaluate_checkpoint, full_model_grad_check, read_thresholds, sweep_csv, sweep_loss_weights,
    write_metrics, write_reports, write_text, write_thresholds, ThresholdMap, SWEEP_FILE, THRESHOLDS_FILE, TRIALS_FILE,
};
use super::split::loso_split;
use super::tuner::tune_thresholds;
use crate::error::{Error, Result};
use crate::numcore::GradCheckOpts;
use crate::rftg::Thresholds;
use crate::synthgen::{generate_cohort, read_cohort, write_cohort, AtlasLayout};

#[derive(Debug, Parser)]
#[command(name = "rtgmff", version, about = "Synthetic fMRI cohorts, ROI reports and the multimodal classifier")]
struct Cli {
    /// TOML file overriding the default configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CohortArgs {
    /// Cohort directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    cohort: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        effect_size: Option<f64>,
    },
    /// Nested-CV search for the discretization thresholds.
    TuneThresholds {
        #[command(flatten)]
        io: CohortArgs,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        sampler: Option<Sampler>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Leave-one-site-out training and testing.
    Train {
        #[command(flatten)]
        io: CohortArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-site thresholds written by `tune-thresholds`.
        #[arg(long, value_name = "FILE")]
        thresholds: Option<PathBuf>,
        /// Training-state checkpoint to continue from.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a fold checkpoint on its held-out site.
    Eval {
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Write the metrics here as JSON.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render per-subject reports and token streams.
    Report {
        #[command(flatten)]
        io: CohortArgs,
        #[arg(long)]
        tau1: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
    },
    /// Grid over the alignment and regularization weights.
    Sweep {
        #[command(flatten)]
        io: CohortArgs,
        /// Add an α = β = 0 reference cell.
        #[arg(long)]
        include_zero: bool,
    },
    /// Finite-difference check of the full loss on the toy model.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        /// Entries sampled per parameter tensor (all when omitted).
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let cohort = read_cohort(dir)?;
    Dataset::from_cohort(&cohort, cfg.train.model.height, cfg.train.model.width)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out,
            seed,
            subjects,
            sites,
            effect_size,
        } => {
            let spec = &mut cfg.cohort;
            spec.seed = seed.unwrap_or(spec.seed);
            spec.n_subjects = subjects.unwrap_or(spec.n_subjects);
            spec.n_sites = sites.unwrap_or(spec.n_sites);
            spec.effect_size = effect_size.unwrap_or(spec.effect_size);
            cfg.validate()?;
            let layout = AtlasLayout::default_64();
            let subjects = generate_cohort(&cfg.cohort)?;
            write_cohort(&out, &cfg.cohort, &layout, &subjects)?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
        }
        Command::TuneThresholds {
            io,
            trials,
            objective,
            sampler,
            seed,
        } => {
            cfg.tune.trials = trials.unwrap_or(cfg.tune.trials);
            cfg.tune.objective = objective.unwrap_or(cfg.tune.objective);
            cfg.tune.sampler = sampler.unwrap_or(cfg.tune.sampler);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.validate()?;
            let ds = load_dataset(&io.cohort, &cfg)?;
            let folds = loso_split(&ds.sites(), &ds.labels(), cfg.train.seed)?;
            let result = tune_thresholds(&ds, &folds, &cfg.train, &cfg.tune)?;
            ensure_dir(&io.out)?;
            write_text(&io.out.join(TRIALS_FILE), &result.trials_csv())?;
            write_thresholds(&io.out.join(THRESHOLDS_FILE), &result.choices)?;
            for c in &result.choices {
                println!("site {}: tau1 {:.4} tau2 {:.4} objective {:.4}", c.test_site, c.tau1, c.tau2, c.objective);
            }
        }
        Command::Train {
            io,
            seed,
            thresholds,
            resume,
        } => {
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.validate()?;
            let ds = load_dataset(&io.cohort, &cfg)?;
            let th = match thresholds {
                Some(p) => read_thresholds(&p)?,
                None => ThresholdMap::new(),
            };
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            if let Some(ck) = &resume {
                if !ck.has_training_state() {
                    return Err(Error::invalid("resume", "checkpoint holds no training state; pass a fold-*.state.ckpt file"));
                }
            }
            let (report, runs) = cross_validate(&ds, &cfg.train, &th, Some(&io.out), resume.as_ref())?;
            if let Some(bad) = runs.iter().find(|r| !r.audit.clean()) {
                return Err(Error::invalid("leakage_audit", format!("fold {} failed: {:?}", bad.fold.test_site, bad.audit)));
            }
            for f in &report.folds {
                println!("site {}: acc {:.4} auc {:?} (best epoch {})", f.test_site, f.metrics.acc, f.metrics.auc, f.best_epoch);
            }
            let s = &report.summary;
            println!("mean acc {:?} ± {:?}, auc {:?} ± {:?}", s.acc.mean, s.acc.std, s.auc.mean, s.auc.std);
        }
        Command::Eval { cohort, checkpoint, out } => {
            cfg.validate()?;
            let ds = load_dataset(&cohort, &cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let m = evaluate_checkpoint(&ds, &cfg.train, &ck)?;
            println!("site {}: acc {:.4} sen {:?} spe {:?} auc {:?}", ck.meta.test_site, m.acc, m.sen, m.spe, m.auc);
            if let Some(p) = out {
                write_metrics(&p, &m)?;
            }
        }
        Command::Report { io, tau1, tau2 } => {
            cfg.train.tau1 = tau1.unwrap_or(cfg.train.tau1);
            cfg.train.tau2 = tau2.unwrap_or(cfg.train.tau2);
            let th = Thresholds::new(cfg.train.tau1, cfg.train.tau2)?;
            let ds = load_dataset(&io.cohort, &cfg)?;
            let n = write_reports(&ds, &th, &io.out)?;
            println!("wrote {n} reports to {}", io.out.display());
        }
        Command::Sweep { io, include_zero } => {
            cfg.sweep.include_zero |= include_zero;
            cfg.validate()?;
            let ds = load_dataset(&io.cohort, &cfg)?;
            let rows = sweep_loss_weights(&ds, &cfg.train, &cfg.sweep.alpha, &cfg.sweep.beta, cfg.sweep.include_zero)?;
            ensure_dir(&io.out)?;
            write_text(&io.out.join(SWEEP_FILE), &sweep_csv(&rows))?;
            println!("wrote {} cells to {}", rows.len(), io.out.join(SWEEP_FILE).display());
        }
        Command::GradCheck {
            subjects,
            max_entries,
            seed,
        } => {
            let opts = GradCheckOpts {
                max_entries,
                ..GradCheckOpts::default()
            };
            let report = full_model_grad_check(subjects, seed, opts)?;
            for leaf in report.leaves.iter().filter(|l| l.max_rel_error >= report.tol) {
                println!("FAIL {}: relative error {:.3e}", leaf.name, leaf.max_rel_error);
            }
            let checked: usize = report.leaves.iter().map(|l| l.checked).sum();
            println!("checked {checked} entries over {} tensors", report.leaves.len());
            println!("max relative error: {:.3e}", report.max_rel_error());
            if !report.passed() {
                return Err(Error::invalid("grad_check", format!("tolerance {:e} exceeded", report.tol)));
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let threads = load_config(cli.config.as_deref()).map(|c| c.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(cli)),
        Err(e) => Err(Error::invalid("threads", e.to_string())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
