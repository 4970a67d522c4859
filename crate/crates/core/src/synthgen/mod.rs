//! Synthetic cohorts and their regional feature maps.

mod cohort;
mod features;
pub mod io;
mod layout;
mod reho;
mod spectral;

pub use cohort::{generate_cohort, roi_delta_bold, subject_id, CohortSpec, Gender, Label, Subject};
pub use features::{
    paint_tiles, render_feature_map, render_values, roi_features, zscore_channels, FeatureMap, CHANNELS,
};
pub use io::{read_cohort, write_cohort, Cohort};
pub use layout::{AtlasLayout, TileRect};
pub use reho::compute_reho;
pub use spectral::{bandpass_filter, compute_alff, compute_falff, magnitude_spectrum, BOLD_BAND, MIN_TIMEPOINTS};
