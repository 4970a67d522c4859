use super::cohort::Subject;
use super::layout::AtlasLayout;
use super::reho::compute_reho;
use super::spectral::{compute_alff, compute_falff};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::N_ROIS;

pub const CHANNELS: [&str; 3] = ["alff", "falff", "reho"];

/// Regional (ALFF, fALFF, ReHo). The amplitude measures are averaged over
/// the ROI's voxels; ReHo is the concordance across them.
pub fn roi_features(subject: &Subject, fs: f64) -> Result<Vec<[f64; 3]>> {
    subject.validate()?;
    (0..N_ROIS)
        .map(|roi| {
            let mut alff = 0.0;
            let mut falff = 0.0;
            for v in 0..subject.voxels {
                let s = subject.voxel_series(roi, v);
                alff += compute_alff(s, fs)?;
                falff += compute_falff(s, fs)?;
            }
            let n = subject.voxels as f64;
            let reho = compute_reho(subject.roi_block(roi), subject.voxels, subject.timepoints)?;
            Ok([alff / n, falff / n, reho])
        })
        .collect()
}

/// Channel-first `[3, H, W]` image; channel order is [`CHANNELS`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image: Tensor,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Fills each tile with its ROI's three values, without normalization.
pub fn paint_tiles(values: &[[f64; 3]], layout: &AtlasLayout) -> Result<Tensor> {
    if values.len() != N_ROIS {
        return Err(Error::shape("paint_tiles", &[N_ROIS, 3], &[values.len(), 3]));
    }
    layout.validate()?;
    let (h, w) = (layout.height, layout.width);
    let mut img = vec![0.0; 3 * h * w];
    for t in &layout.tiles {
        for c in 0..3 {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for r in t.row..t.row + t.height {
                plane[r * w + t.col..r * w + t.col + t.width].fill(values[t.roi][c]);
            }
        }
    }
    Tensor::new(&[3, h, w], img)
}

/// Per-channel z-score over the 116 regional values (population variance).
pub fn zscore_channels(values: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let n = values.len() as f64;
    let mut out = values.to_vec();
    for c in 0..3 {
        let mean = values.iter().map(|v| v[c]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::invalid(
                "render_feature_map",
                format!("channel {} is constant across ROIs", CHANNELS[c]),
            ));
        }
        let sd = var.sqrt();
        out.iter_mut().for_each(|v| v[c] = (v[c] - mean) / sd);
    }
    Ok(out)
}

pub fn render_values(values: &[[f64; 3]], layout: &AtlasLayout) -> Result<FeatureMap> {
    Ok(FeatureMap {
        image: paint_tiles(&zscore_channels(values)?, layout)?,
    })
}

pub fn render_feature_map(subject: &Subject, layout: &AtlasLayout, fs: f64) -> Result<FeatureMap> {
    render_values(&roi_features(subject, fs)?, layout)
}
