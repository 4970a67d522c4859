pub mod asam;
pub mod cste;
pub mod error;
pub mod harness;
pub mod hwm;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod rftg;
pub mod rng;
pub mod synthgen;

/// Number of atlas regions.
pub const N_ROIS: usize = 116;

pub use error::{Error, Result};
