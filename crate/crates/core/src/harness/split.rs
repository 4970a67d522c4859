use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synthgen::Label;

const SPLIT_TAG: u64 = 0x5b_11;
const KFOLD_TAG: u64 = 0x4f_0d;

pub const VAL_FRACTION: f64 = 0.1;

/// One leave-one-site-out fold, as indices into the cohort's subject list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_site: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    /// Everything outside the held-out site.
    pub fn development(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        all.sort_unstable();
        all
    }
}

fn by_class(indices: &[usize], labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for &i in indices {
        out[labels[i].index()].push(i);
    }
    out
}

/// One fold per site; the remaining sites are split 90/10 into train and
/// validation, stratified by label.
pub fn loso_split(sites: &[usize], labels: &[Label], seed: u64) -> Result<Vec<Fold>> {
    if sites.len() != labels.len() {
        return Err(Error::shape("loso_split", &[sites.len()], &[labels.len()]));
    }
    let distinct: BTreeSet<usize> = sites.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "loso_split",
            format!("leave-one-site-out needs at least 2 sites, found {}", distinct.len()),
        ));
    }
    let mut folds = Vec::with_capacity(distinct.len());
    for &site in &distinct {
        let test: Vec<usize> = (0..sites.len()).filter(|&i| sites[i] == site).collect();
        let rest: Vec<usize> = (0..sites.len()).filter(|&i| sites[i] != site).collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (class, mut members) in by_class(&rest, labels).into_iter().enumerate() {
            members.shuffle(&mut stream(seed, &[SPLIT_TAG, site as u64, class as u64]));
            let n_val = (members.len() as f64 * VAL_FRACTION).round() as usize;
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        if train.is_empty() {
            return Err(Error::invalid("loso_split", format!("fold for site {site} has no training subjects")));
        }
        folds.push(Fold {
            test_site: site,
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// Stratified k-fold partition of `indices`: returns `(train, held_out)` pairs.
pub fn stratified_kfold(indices: &[usize], labels: &[Label], k: usize, seed: u64, tag: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || indices.len() < k {
        return Err(Error::invalid(
            "stratified_kfold",
            format!("cannot split {} subjects into {k} folds", indices.len()),
        ));
    }
    let mut buckets = vec![Vec::new(); k];
    let mut next = 0;
    for (class, mut members) in by_class(indices, labels).into_iter().enumerate() {
        members.shuffle(&mut stream(seed, &[KFOLD_TAG, tag, class as u64]));
        for m in members {
            buckets[next % k].push(m);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut held = buckets[f].clone();
            held.sort_unstable();
            let mut train: Vec<usize> = (0..k).filter(|&o| o != f).flat_map(|o| buckets[o].iter().copied()).collect();
            train.sort_unstable();
            (train, held)
        })
        .collect())
}
