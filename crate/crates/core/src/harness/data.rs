use rayon::prelude::*;

use crate::asam::TextEmbedder;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numcore::Tensor;
use crate::rftg::{age_stats, demographic_vector, discretize, serialize_tokens, RoiTokenSeq, Thresholds};
use crate::synthgen::{generate_cohort, render_feature_map, roi_delta_bold, AtlasLayout, Cohort, CohortSpec, Gender, Label, Subject};

/// Everything the pipeline needs from one subject, with raw series dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub site: usize,
    pub label: Label,
    pub age_years: f64,
    pub gender: Gender,
    /// `[3, H, W]` feature map.
    pub image: Tensor,
    pub delta_bold: Vec<f64>,
    pub clean_delta_bold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: CohortSpec,
    pub height: usize,
    pub width: usize,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn from_subjects(spec: &CohortSpec, layout: &AtlasLayout, subjects: &[Subject]) -> Result<Self> {
        let prepared = subjects
            .par_iter()
            .map(|s| {
                Ok(SubjectData {
                    id: s.subject_id.clone(),
                    site: s.site_id,
                    label: s.label,
                    age_years: s.age_years,
                    gender: s.gender,
                    image: render_feature_map(s, layout, spec.sampling_rate_hz)?.image,
                    delta_bold: roi_delta_bold(s)?,
                    clean_delta_bold: s.clean_delta_bold.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            height: layout.height,
            width: layout.width,
            subjects: prepared,
        })
    }

    /// Renders a stored cohort onto an `height × width` canvas, reusing the
    /// stored layout when it already has that size.
    pub fn from_cohort(cohort: &Cohort, height: usize, width: usize) -> Result<Self> {
        let layout = if (cohort.layout.height, cohort.layout.width) == (height, width) {
            cohort.layout.clone()
        } else {
            AtlasLayout::for_canvas(height, width)?
        };
        Self::from_subjects(&cohort.spec, &layout, &cohort.subjects)
    }

    pub fn generate(spec: &CohortSpec, height: usize, width: usize) -> Result<Self> {
        let layout = AtlasLayout::for_canvas(height, width)?;
        Self::from_subjects(spec, &layout, &generate_cohort(spec)?)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn sites(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.site).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.subjects[i].id.clone()).collect()
    }
}

/// Statistics fitted on a training split and applied unchanged elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub age_mean: f64,
    pub age_std: f64,
    pub thresholds: Thresholds,
    /// Subjects whose ages entered the statistics.
    pub fitted_on: Vec<String>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset, train: &[usize], thresholds: Thresholds) -> Result<Self> {
        let ages: Vec<f64> = train.iter().map(|&i| ds.subjects[i].age_years).collect();
        let (age_mean, age_std) = age_stats(&ages)?;
        Ok(Self {
            age_mean,
            age_std,
            thresholds,
            fitted_on: ds.ids(train),
        })
    }
}

pub fn subject_tokens(s: &SubjectData, thresholds: &Thresholds) -> Result<RoiTokenSeq> {
    serialize_tokens(&discretize(&s.delta_bold, thresholds)?, s.age_years, s.gender)
}

/// Model inputs of one subject under a given normalizer.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub index: usize,
    pub image: Tensor,
    pub demographics: [f64; 3],
    pub text: Vec<f64>,
    pub label: usize,
}

pub fn encode(ds: &Dataset, indices: &[usize], norm: &Normalizer, embedder: &TextEmbedder) -> Result<Vec<Encoded>> {
    indices
        .iter()
        .map(|&i| {
            let s = &ds.subjects[i];
            let tokens = subject_tokens(s, &norm.thresholds)?;
            Ok(Encoded {
                index: i,
                image: s.image.clone(),
                demographics: demographic_vector(s.age_years, s.gender, norm.age_mean, norm.age_std)?.to_array(),
                text: embedder.embed(&tokens)?,
                label: s.label.index(),
            })
        })
        .collect()
}

pub fn make_batch(items: &[&Encoded]) -> Result<Batch> {
    let Some(first) = items.first() else {
        return Err(Error::invalid("make_batch", "empty batch"));
    };
    let img_shape = first.image.shape().to_vec();
    let text_dim = first.text.len();
    let mut images = Vec::with_capacity(items.len() * first.image.len());
    let mut demo = Vec::with_capacity(items.len() * 3);
    let mut text = Vec::with_capacity(items.len() * text_dim);
    for e in items {
        if e.image.shape() != img_shape.as_slice() {
            return Err(Error::shape("make_batch", &img_shape, e.image.shape()));
        }
        images.extend_from_slice(e.image.data());
        demo.extend_from_slice(&e.demographics);
        text.extend_from_slice(&e.text);
    }
    let b = items.len();
    let mut shape = vec![b];
    shape.extend_from_slice(&img_shape);
    Ok(Batch {
        images: Tensor::new(&shape, images)?,
        demographics: Tensor::new(&[b, 3], demo)?,
        text: Tensor::new(&[b, text_dim], text)?,
        labels: items.iter().map(|e| e.label).collect(),
    })
}
