use serde::{Deserialize, Serialize};

use super::discretize::{Polarity, RoiTriplet, Strength};
use crate::error::{Error, Result};
use crate::synthgen::Gender;
use crate::N_ROIS;

pub const AGE_BUCKET_YEARS: usize = 2;
/// Ages at or above this have no bucket token.
pub const MAX_AGE_YEARS: usize = 100;

/// Token stream: age bucket, sex, then one token per ROI triplet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoiTokenSeq {
    pub tokens: Vec<String>,
}

/// Lower edge of the 2-year bucket containing `age_years`.
pub fn age_bucket(age_years: f64) -> Result<usize> {
    if !(age_years >= 0.0 && age_years < MAX_AGE_YEARS as f64) {
        return Err(Error::invalid(
            "age_bucket",
            format!("age {age_years} outside [0, {MAX_AGE_YEARS})"),
        ));
    }
    let years = age_years.floor() as usize;
    Ok(years - years % AGE_BUCKET_YEARS)
}

pub fn age_token(bucket: usize) -> String {
    format!("[AGE:{bucket}]")
}

pub fn sex_token(gender: Gender) -> &'static str {
    match gender {
        Gender::Male => "[SEX:m]",
        Gender::Female => "[SEX:f]",
    }
}

pub fn triplet_token(roi: usize, strength: Strength, polarity: Polarity) -> String {
    format!("(ROI_{roi} {strength} {polarity})")
}

/// Every token [`serialize_tokens`] can emit, in a fixed order.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = (0..MAX_AGE_YEARS).step_by(AGE_BUCKET_YEARS).map(age_token).collect();
    v.push(sex_token(Gender::Male).to_string());
    v.push(sex_token(Gender::Female).to_string());
    for roi in 0..N_ROIS {
        for s in Strength::ALL {
            for p in Polarity::ALL {
                v.push(triplet_token(roi, s, p));
            }
        }
    }
    v
}

fn check_order(triplets: &[RoiTriplet]) -> Result<()> {
    if triplets.len() != N_ROIS {
        return Err(Error::invalid(
            "serialize_tokens",
            format!("expected {N_ROIS} triplets, got {}", triplets.len()),
        ));
    }
    if let Some((i, t)) = triplets.iter().enumerate().find(|(i, t)| t.roi_index != *i) {
        return Err(Error::invalid(
            "serialize_tokens",
            format!("triplet at position {i} has ROI {}; ascending order required", t.roi_index),
        ));
    }
    Ok(())
}

pub fn serialize_tokens(triplets: &[RoiTriplet], age_years: f64, gender: Gender) -> Result<RoiTokenSeq> {
    check_order(triplets)?;
    let mut tokens = Vec::with_capacity(N_ROIS + 2);
    tokens.push(age_token(age_bucket(age_years)?));
    tokens.push(sex_token(gender).to_string());
    tokens.extend(
        triplets
            .iter()
            .map(|t| triplet_token(t.roi_index, t.strength, t.polarity)),
    );
    Ok(RoiTokenSeq { tokens })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedTokens {
    pub age_bucket: usize,
    pub gender: Gender,
    pub triplets: Vec<RoiTriplet>,
}

fn parse_triplet(tok: &str) -> Option<(usize, Strength, Polarity)> {
    let body = tok.strip_prefix("(ROI_")?.strip_suffix(')')?;
    let mut parts = body.split(' ');
    let roi = parts.next()?.parse().ok()?;
    let s = parts.next()?.parse().ok()?;
    let p = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((roi, s, p))
}

/// Inverse of [`serialize_tokens`].
pub fn parse_tokens(seq: &RoiTokenSeq) -> Result<ParsedTokens> {
    let bad = |pos: usize, msg: String| Error::format(format!("token {pos}"), msg);
    let toks = &seq.tokens;
    if toks.len() != N_ROIS + 2 {
        return Err(Error::format(
            "token stream",
            format!("expected {} tokens, got {}", N_ROIS + 2, toks.len()),
        ));
    }
    let age_bucket: usize = toks[0]
        .strip_prefix("[AGE:")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse().ok())
        .filter(|b| b % AGE_BUCKET_YEARS == 0 && *b < MAX_AGE_YEARS)
        .ok_or_else(|| bad(0, format!("bad age token {:?}", toks[0])))?;
    let gender = match toks[1].as_str() {
        "[SEX:m]" => Gender::Male,
        "[SEX:f]" => Gender::Female,
        other => return Err(bad(1, format!("bad sex token {other:?}"))),
    };
    let triplets = toks[2..]
        .iter()
        .enumerate()
        .map(|(i, tok)| match parse_triplet(tok) {
            Some((roi, s, p)) if roi == i => RoiTriplet::new(roi, s, p),
            _ => Err(bad(i + 2, format!("bad triplet token {tok:?} for ROI {i}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedTokens {
        age_bucket,
        gender,
        triplets,
    })
}
