use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::aal::roi_name;
use crate::error::{Error, Result};
use crate::N_ROIS;

/// Minimum gap between the two thresholds.
pub const THRESHOLD_GAP: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub delta: f64,
}

impl Thresholds {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        let th = Self {
            tau1,
            tau2,
            delta: THRESHOLD_GAP,
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 >= self.tau1 + self.delta && self.tau2.is_finite()) {
            return Err(Error::invalid(
                "thresholds",
                format!(
                    "need 0 < tau1 and tau2 ≥ tau1 + {}, got ({}, {})",
                    self.delta, self.tau1, self.tau2
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Moderate,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Up,
    Down,
}

impl Strength {
    pub const ALL: [Strength; 3] = [Strength::Weak, Strength::Moderate, Strength::Strong];

    pub fn as_str(self) -> &'static str {
        match self {
            Strength::Weak => "weak",
            Strength::Moderate => "moderate",
            Strength::Strong => "strong",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Up, Polarity::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Up => "up",
            Polarity::Down => "down",
        }
    }
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strength::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid("strength", format!("unknown strength {s:?}")))
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Polarity::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid("polarity", format!("unknown polarity {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiTriplet {
    pub roi_index: usize,
    pub roi_name: String,
    pub strength: Strength,
    pub polarity: Polarity,
}

impl RoiTriplet {
    pub fn new(roi_index: usize, strength: Strength, polarity: Polarity) -> Result<Self> {
        Ok(Self {
            roi_index,
            roi_name: roi_name(roi_index)?.to_string(),
            strength,
            polarity,
        })
    }
}

/// Strength and polarity of a single value; bins are closed below.
pub fn classify_value(v: f64, th: &Thresholds) -> (Strength, Polarity) {
    let a = v.abs();
    let strength = if a >= th.tau2 {
        Strength::Strong
    } else if a >= th.tau1 {
        Strength::Moderate
    } else {
        Strength::Weak
    };
    let polarity = if v >= 0.0 { Polarity::Up } else { Polarity::Down };
    (strength, polarity)
}

pub fn discretize(v: &[f64], th: &Thresholds) -> Result<Vec<RoiTriplet>> {
    th.validate()?;
    if v.len() != N_ROIS {
        return Err(Error::shape("discretize", &[N_ROIS], &[v.len()]));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "discretize" });
    }
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let (s, p) = classify_value(x, th);
            RoiTriplet::new(i, s, p)
        })
        .collect()
}
