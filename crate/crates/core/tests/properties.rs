mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtgmff::harness::checkpoint::NamedTensor;
use rtgmff::harness::tuner::{feasible, propose};
use rtgmff::harness::{
    auc_mann_whitney, auc_trapezoid, evaluate_scores, loso_split, stratified_kfold, Checkpoint, CheckpointMeta,
    EpochRecord, TuneConfig,
};
use rtgmff::hwm::{haar_dwt_level, haar_idwt_level, multiscale_decompose, reconstruct};
use rtgmff::numcore::{LrSchedule, ParamGroup, Tensor};
use rtgmff::rftg::{
    discretize, parse_report, parse_tokens, render_report, serialize_tokens, Polarity, RoiTriplet, Strength,
    Thresholds,
};
use rtgmff::synthgen::{Gender, Label};
use rtgmff::N_ROIS;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-100.0..100.0f64, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn image() -> impl Strategy<Value = (Tensor, usize)> {
    (1..=2usize, 1..=3usize, 1..=3usize, 1..=3usize, 1..=3usize).prop_flat_map(|(n, c, levels, hm, wm)| {
        let m = 1 << levels;
        tensor(vec![n, c, hm * m, wm * m]).prop_map(move |t| (t, levels))
    })
}

fn thresholds() -> impl Strategy<Value = Thresholds> {
    (0.05..0.45f64, 0.0..1.0f64).prop_map(|(t1, u)| Thresholds::new(t1, t1 + 0.02 + u * (0.60 - t1 - 0.02)).unwrap())
}

fn triplets() -> impl Strategy<Value = Vec<RoiTriplet>> {
    prop::collection::vec((0..3usize, any::<bool>()), N_ROIS).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, up))| RoiTriplet::new(i, Strength::ALL[s], if up { Polarity::Up } else { Polarity::Down }).unwrap())
            .collect()
    })
}

fn gender() -> impl Strategy<Value = Gender> {
    prop_oneof![Just(Gender::Male), Just(Gender::Female)]
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1..40usize).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![0.0..1.0f64, (0..5u8).prop_map(|k| k as f64 / 4.0)], n),
            prop::collection::vec(0..2usize, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haar_level_is_invertible(t in image().prop_map(|(t, _)| t)) {
        let back = haar_idwt_level(&haar_dwt_level(&t).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&t) < 1e-12 * 100.0);
    }

    #[test]
    fn pyramid_reconstructs_and_keeps_energy((t, levels) in image()) {
        let pyr = multiscale_decompose(&t, levels).unwrap();
        prop_assert_eq!(pyr.levels.len(), levels);
        prop_assert!(reconstruct(&pyr).unwrap().max_abs_diff(&t) < 1e-12 * 100.0);
        let e = t.sum_squares();
        prop_assert!((pyr.retained_energy().unwrap() - e).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn discretize_is_ordered_and_monotone(th in thresholds(), v in prop::collection::vec(-1.0..1.0f64, N_ROIS)) {
        let t = discretize(&v, &th).unwrap();
        for (i, tr) in t.iter().enumerate() {
            prop_assert_eq!(tr.roi_index, i);
            prop_assert_eq!(tr.polarity == Polarity::Down, v[i] < 0.0);
        }
        for i in 0..N_ROIS {
            for j in 0..N_ROIS {
                if v[i].abs() <= v[j].abs() {
                    prop_assert!(t[i].strength <= t[j].strength);
                }
            }
        }
    }

    #[test]
    fn thresholds_require_the_gap(t1 in 0.01..0.6f64, t2 in 0.0..0.8f64) {
        prop_assert_eq!(Thresholds::new(t1, t2).is_ok(), t2 >= t1 + 0.02);
    }

    #[test]
    fn tokens_round_trip(tr in triplets(), age in 0.5..99.0f64, g in gender()) {
        let seq = serialize_tokens(&tr, age, g).unwrap();
        let back = parse_tokens(&seq).unwrap();
        prop_assert_eq!(back.triplets, tr);
        prop_assert_eq!(back.gender, g);
        prop_assert_eq!(back.age_bucket, (age.floor() as usize) / 2 * 2);
    }

    #[test]
    fn reports_parse_back(tr in triplets(), age in 1.0..90.0f64, g in gender()) {
        let text = render_report(&tr, age, g).unwrap();
        let parsed = parse_report(&text).unwrap();
        prop_assert_eq!(parsed.age, age.floor() as u64);
        prop_assert_eq!(parsed.clauses.len(), N_ROIS);
        for (c, t) in parsed.clauses.iter().zip(&tr) {
            prop_assert_eq!(&c.0, &t.roi_name);
            prop_assert_eq!((c.1, c.2), (t.strength, t.polarity));
        }
        let boyish = matches!(parsed.subject_noun.as_str(), "boy" | "man");
        prop_assert_eq!(boyish, g == Gender::Male);
    }

    #[test]
    fn confusion_counts_are_consistent((probs, labels) in scored()) {
        let m = evaluate_scores(&probs, &labels).unwrap();
        prop_assert_eq!(m.total(), labels.len());
        prop_assert_eq!(m.tp + m.fn_, labels.iter().filter(|&&l| l == 1).count());
        prop_assert!((m.acc - (m.tp + m.tn) as f64 / labels.len() as f64).abs() < 1e-15);
        let both = m.tp + m.fn_ > 0 && m.tn + m.fp > 0;
        prop_assert_eq!(m.sen.is_some(), both);
        prop_assert_eq!(m.spe.is_some(), both);
        prop_assert_eq!(m.auc.is_some(), both);
    }

    #[test]
    fn auc_forms_agree_and_flip((probs, labels) in scored()) {
        let a = auc_mann_whitney(&probs, &labels);
        let b = auc_trapezoid(&probs, &labels);
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let neg: Vec<f64> = probs.iter().map(|p| -p).collect();
            prop_assert!((auc_mann_whitney(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn loso_folds_partition_and_stratify(
        sites in prop::collection::vec(0..4usize, 8..80),
        patient in prop::collection::vec(any::<bool>(), 80),
        seed in any::<u64>(),
    ) {
        let labels: Vec<Label> = sites.iter().zip(&patient).map(|(_, &p)| if p { Label::Patient } else { Label::Control }).collect();
        let distinct: std::collections::BTreeSet<usize> = sites.iter().copied().collect();
        let folds = match loso_split(&sites, &labels, seed) {
            Ok(f) => f,
            Err(_) => {
                prop_assert!(distinct.len() < 2);
                return Ok(());
            }
        };
        prop_assert_eq!(folds.len(), distinct.len());
        for f in &folds {
            let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..sites.len()).collect::<Vec<_>>());
            prop_assert!(f.test.iter().all(|&i| sites[i] == f.test_site));
            prop_assert!(f.train.iter().chain(&f.val).all(|&i| sites[i] != f.test_site));
            let dev = f.development();
            let dev_pat = dev.iter().filter(|&&i| labels[i] == Label::Patient).count() as f64;
            let train_pat = f.train.iter().filter(|&&i| labels[i] == Label::Patient).count() as f64;
            if !f.train.is_empty() {
                let overall = dev_pat / dev.len() as f64;
                let train = train_pat / f.train.len() as f64;
                prop_assert!((train - overall).abs() * f.train.len() as f64 <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn kfold_is_a_partition(n in 3..60usize, k in 2..=3usize, seed in any::<u64>()) {
        let labels: Vec<Label> = (0..2 * n).map(|i| if i % 3 == 0 { Label::Patient } else { Label::Control }).collect();
        let idx: Vec<usize> = (0..n).map(|i| i * 2).collect();
        let folds = stratified_kfold(&idx, &labels, k, seed, 7).unwrap();
        let mut held: Vec<usize> = folds.iter().flat_map(|(_, h)| h.clone()).collect();
        held.sort_unstable();
        prop_assert_eq!(held, idx.clone());
        for (train, h) in &folds {
            prop_assert_eq!(train.len() + h.len(), n);
            prop_assert!(train.iter().all(|i| !h.contains(i)));
        }
    }

    #[test]
    fn checkpoints_round_trip(
        digest in any::<[u8; 32]>(),
        shapes in prop::collection::vec(prop::collection::vec(1..4usize, 0..4), 0..5),
        seed in any::<u64>(),
        losses in prop::collection::vec(-10.0..10.0f64, 0..6),
    ) {
        let mut r = common::rng(seed);
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| NamedTensor {
                name: format!("param/t{i}"),
                group: [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Buffer][i % 3],
                tensor: common::rand_tensor(&mut r, s, 1e6),
            })
            .collect();
        let history = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| EpochRecord {
                epoch: i + 1,
                train_loss: l,
                val_loss: (i % 2 == 0).then_some(l * 0.5),
                val_acc: None,
                lr_factor: 1.0 / (i + 1) as f64,
                backbone_frozen: i < 2,
            })
            .collect();
        let ck = Checkpoint {
            config_digest: digest,
            meta: CheckpointMeta {
                test_site: 3,
                epoch: losses.len(),
                best_epoch: 1,
                best_val_loss: Some(0.1 + 0.2),
                bad_epochs: 0,
                stopped: false,
                age_mean: 12.345_678_901_234_567,
                age_std: std::f64::consts::PI,
                tau1: 0.15,
                tau2: 0.3,
                history,
            },
            tensors,
        };
        let bytes = ck.encode().unwrap();
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn proposals_stay_feasible(
        history in prop::collection::vec((0.05..0.45f64, 0.0..1.0f64, -1.0..1.0f64), 0..40),
        seed in any::<u64>(),
    ) {
        let hist: Vec<(f64, f64, f64)> = history
            .iter()
            .map(|&(t1, u, y)| (t1, t1 + 0.02 + u * (0.58 - t1), y))
            .collect();
        let cfg = TuneConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let (t1, t2) = propose(&hist, &cfg, &mut r).unwrap();
            prop_assert!(feasible(t1, t2), "({}, {})", t1, t2);
            prop_assert!(t2 >= t1 + 0.02);
        }
    }

    #[test]
    fn schedule_factor_is_a_fraction(warmup in 0..10usize, extra in 1..200usize, epoch_frac in 0.0..1.0f64) {
        let max = warmup + extra;
        let s = LrSchedule::new(1.0, warmup, max).unwrap();
        let epoch = 1 + ((max - 1) as f64 * epoch_frac) as usize;
        let f = s.factor(epoch).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }
}
