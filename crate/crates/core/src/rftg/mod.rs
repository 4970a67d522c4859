//! Discretized regional activity, demographic conditioning, token streams
//! and text reports.

mod aal;
mod discretize;
mod film;
mod report;
mod tokens;

pub use aal::{aal_table, parse_aal_table, roi_name, AalEntry};
pub use discretize::{classify_value, discretize, Polarity, RoiTriplet, Strength, Thresholds, THRESHOLD_GAP};
pub use film::{age_stats, demographic_vector, DemographicVector, FilmLayer, FILM_HIDDEN};
pub use report::{parse_report, render_report, ParsedReport, REPORT_TEMPLATE};
pub use tokens::{
    age_bucket, age_token, parse_tokens, serialize_tokens, sex_token, triplet_token, vocabulary, ParsedTokens,
    RoiTokenSeq, AGE_BUCKET_YEARS, MAX_AGE_YEARS,
};
