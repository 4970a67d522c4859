use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spectral::{bandpass_filter, BOLD_BAND, MIN_TIMEPOINTS};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::N_ROIS;

const SITE_TAG: u64 = 0x5175;
const LABEL_TAG: u64 = 0x1abe;
const SUBJECT_TAG: u64 = 0x50b1;

const BASELINE: f64 = 100.0;
const SITE_OFFSET_RANGE: f64 = 5.0;
const VOXEL_BAND_SCALE: f64 = 0.5;
const WHITE_NOISE_SD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Control,
    Patient,
}

impl Label {
    /// Class index used by the classifier: control 0, patient 1.
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Patient => 1,
        }
    }
}

fn default_truth_thresholds() -> (f64, f64) {
    (0.15, 0.30)
}

fn default_activation_spread() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub n_sites: usize,
    /// Fraction of patients within each site.
    pub class_ratio: f64,
    pub planted_rois: BTreeSet<usize>,
    /// Band-amplitude boost applied to planted ROIs of patients.
    pub effect_size: f64,
    pub sampling_rate_hz: f64,
    #[serde(alias = "T")]
    pub timepoints: usize,
    #[serde(alias = "V")]
    pub voxels: usize,
    pub seed: u64,
    /// Ground-truth strength thresholds for the noise-free ΔBOLD vector.
    #[serde(default = "default_truth_thresholds")]
    pub truth_thresholds: (f64, f64),
    /// Maximum absolute regional baseline deviation, in percent.
    #[serde(default = "default_activation_spread")]
    pub activation_spread: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_sites: 5,
            class_ratio: 0.5,
            planted_rois: [2, 9, 16, 29, 36, 43, 58, 67, 80, 95].into_iter().collect(),
            effect_size: 3.0,
            sampling_rate_hz: 0.5,
            timepoints: 128,
            voxels: 8,
            seed: 42,
            truth_thresholds: default_truth_thresholds(),
            activation_spread: default_activation_spread(),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("cohort_spec", msg));
        if self.n_subjects == 0 || self.n_sites == 0 {
            return bad(format!(
                "need at least one subject and site, got n_subjects={}, n_sites={}",
                self.n_subjects, self.n_sites
            ));
        }
        if !(self.class_ratio > 0.0 && self.class_ratio < 1.0) {
            return bad(format!("class_ratio must lie in (0, 1), got {}", self.class_ratio));
        }
        if let Some(&r) = self.planted_rois.iter().find(|&&r| r >= N_ROIS) {
            return bad(format!("planted ROI {r} outside [0, {N_ROIS})"));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return bad(format!("effect_size must be finite and ≥ 0, got {}", self.effect_size));
        }
        if !(self.sampling_rate_hz > 2.0 * BOLD_BAND.1) || !self.sampling_rate_hz.is_finite() {
            return bad(format!(
                "sampling_rate_hz must exceed {} Hz, got {}",
                2.0 * BOLD_BAND.1,
                self.sampling_rate_hz
            ));
        }
        if self.timepoints < MIN_TIMEPOINTS || self.timepoints > u16::MAX as usize {
            return bad(format!(
                "T must lie in [{MIN_TIMEPOINTS}, {}], got {}",
                u16::MAX,
                self.timepoints
            ));
        }
        if self.voxels < 2 || self.voxels > u16::MAX as usize {
            return bad(format!("V must lie in [2, {}], got {}", u16::MAX, self.voxels));
        }
        let (t1, t2) = self.truth_thresholds;
        if !(t1 > 0.0 && t2 > t1) {
            return bad(format!("truth_thresholds need 0 < tau1 < tau2, got ({t1}, {t2})"));
        }
        if !(self.activation_spread > 0.0 && self.activation_spread < 50.0) {
            return bad(format!("activation_spread must lie in (0, 50), got {}", self.activation_spread));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub subject_id: String,
    pub age_years: f64,
    pub gender: Gender,
    pub site_id: usize,
    pub label: Label,
    pub voxels: usize,
    pub timepoints: usize,
    /// ROI-major, then voxel, then time: `[116][V][T]`.
    pub roi_series: Vec<f64>,
    /// ΔBOLD of the noise-free regional baselines.
    pub clean_delta_bold: Vec<f64>,
}

impl Subject {
    pub fn roi_block(&self, roi: usize) -> &[f64] {
        let n = self.voxels * self.timepoints;
        &self.roi_series[roi * n..(roi + 1) * n]
    }

    pub fn voxel_series(&self, roi: usize, voxel: usize) -> &[f64] {
        let block = self.roi_block(roi);
        &block[voxel * self.timepoints..(voxel + 1) * self.timepoints]
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels < 2 || self.timepoints < MIN_TIMEPOINTS {
            return Err(Error::invalid(
                "subject",
                format!("{}: need V ≥ 2 and T ≥ {MIN_TIMEPOINTS}", self.subject_id),
            ));
        }
        if self.roi_series.len() != N_ROIS * self.voxels * self.timepoints {
            return Err(Error::shape(
                "subject",
                &[N_ROIS, self.voxels, self.timepoints],
                &[self.roi_series.len()],
            ));
        }
        if !(self.age_years > 0.0) {
            return Err(Error::invalid("subject", format!("{}: age must be positive", self.subject_id)));
        }
        if self.roi_series.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "subject" });
        }
        Ok(())
    }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:04}")
}

fn percent_change(means: &[f64]) -> Result<Vec<f64>> {
    let global = means.iter().sum::<f64>() / means.len() as f64;
    if !(global > 0.0) {
        return Err(Error::invalid(
            "roi_delta_bold",
            format!("global mean signal must be positive, got {global}"),
        ));
    }
    Ok(means.iter().map(|m| 100.0 * (m - global) / global).collect())
}

/// Per-ROI percentage deviation of the temporal mean from the subject-global
/// mean signal.
pub fn roi_delta_bold(subject: &Subject) -> Result<Vec<f64>> {
    subject.validate()?;
    let n = subject.voxels * subject.timepoints;
    let means: Vec<f64> = (0..N_ROIS)
        .map(|r| subject.roi_block(r).iter().sum::<f64>() / n as f64)
        .collect();
    percent_change(&means)
}

fn band_signal<R: Rng>(rng: &mut R, t: usize, fs: f64) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..t).map(|_| StandardNormal.sample(rng)).collect();
    let mut band = bandpass_filter(&white, BOLD_BAND.0, BOLD_BAND.1, fs)?;
    let rms = (band.iter().map(|v| v * v).sum::<f64>() / t as f64).sqrt();
    if rms > 0.0 {
        band.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(band)
}

fn assign_labels(spec: &CohortSpec) -> Vec<Label> {
    let mut labels = vec![Label::Control; spec.n_subjects];
    for site in 0..spec.n_sites {
        let members: Vec<usize> = (site..spec.n_subjects).step_by(spec.n_sites).collect();
        let n_pat = (spec.class_ratio * members.len() as f64).round() as usize;
        let mut site_labels: Vec<Label> = (0..members.len())
            .map(|i| if i < n_pat { Label::Patient } else { Label::Control })
            .collect();
        site_labels.shuffle(&mut stream(spec.seed, &[LABEL_TAG, site as u64]));
        for (&m, l) in members.iter().zip(site_labels) {
            labels[m] = l;
        }
    }
    labels
}

fn generate_subject(spec: &CohortSpec, index: usize, label: Label, site_offset: f64) -> Result<Subject> {
    let mut rng = stream(spec.seed, &[SUBJECT_TAG, index as u64]);
    let (t, v, fs) = (spec.timepoints, spec.voxels, spec.sampling_rate_hz);
    let age_years = rng.gen_range(8.0..=18.0);
    let gender = if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female };

    let baselines: Vec<f64> = (0..N_ROIS)
        .map(|_| {
            let magnitude = rng.gen_range(0.0..spec.activation_spread);
            let delta = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            BASELINE * (1.0 + delta / 100.0) + site_offset
        })
        .collect();
    let clean_delta_bold = percent_change(&baselines)?;

    let mut roi_series = Vec::with_capacity(N_ROIS * v * t);
    for (roi, &base) in baselines.iter().enumerate() {
        let boosted = label == Label::Patient && spec.planted_rois.contains(&roi);
        let amp = 1.0 + if boosted { spec.effect_size } else { 0.0 };
        let shared = band_signal(&mut rng, t, fs)?;
        for _ in 0..v {
            let own = band_signal(&mut rng, t, fs)?;
            for k in 0..t {
                let noise: f64 = StandardNormal.sample(&mut rng);
                roi_series.push(base + amp * shared[k] + VOXEL_BAND_SCALE * own[k] + WHITE_NOISE_SD * noise);
            }
        }
    }
    Ok(Subject {
        subject_id: subject_id(index),
        age_years,
        gender,
        site_id: index % spec.n_sites,
        label,
        voxels: v,
        timepoints: t,
        roi_series,
        clean_delta_bold,
    })
}

/// Synthetic cohort: site `i % n_sites`, labels stratified per site, and
/// an independent RNG stream per subject so output is thread-count free.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Subject>> {
    spec.validate()?;
    let labels = assign_labels(spec);
    let offsets: Vec<f64> = (0..spec.n_sites)
        .map(|s| stream(spec.seed, &[SITE_TAG, s as u64]).gen_range(-SITE_OFFSET_RANGE..=SITE_OFFSET_RANGE))
        .collect();
    (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i, labels[i], offsets[i % spec.n_sites]))
        .collect()
}
