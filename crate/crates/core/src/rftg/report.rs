use std::sync::OnceLock;

use minijinja::{context, Environment};

use super::aal::aal_table;
use super::discretize::{Polarity, RoiTriplet, Strength};
use crate::error::{Error, Result};
use crate::synthgen::Gender;
use crate::N_ROIS;

pub const REPORT_TEMPLATE: &str = include_str!("../../data/report.j2");
const TEMPLATE_NAME: &str = "report.j2";

fn environment() -> &'static Environment<'static> {
    static ENV: OnceLock<Environment<'static>> = OnceLock::new();
    ENV.get_or_init(|| {
        let mut env = Environment::new();
        env.set_keep_trailing_newline(true);
        env.add_template(TEMPLATE_NAME, REPORT_TEMPLATE)
            .expect("shipped report template compiles");
        env
    })
}

fn gender_str(gender: Gender) -> &'static str {
    match gender {
        Gender::Male => "male",
        Gender::Female => "female",
    }
}

/// Header sentence plus one sentence per ROI.
pub fn render_report(triplets: &[RoiTriplet], age_years: f64, gender: Gender) -> Result<String> {
    if triplets.len() != N_ROIS {
        return Err(Error::invalid(
            "render_report",
            format!("expected {N_ROIS} triplets, got {}", triplets.len()),
        ));
    }
    let table = aal_table();
    for t in triplets {
        if table.get(t.roi_index).map(|e| e.name.as_str()) != Some(t.roi_name.as_str()) {
            return Err(Error::invalid(
                "render_report",
                format!("unknown ROI name {:?} for index {}", t.roi_name, t.roi_index),
            ));
        }
    }
    if !(age_years > 0.0 && age_years.is_finite()) {
        return Err(Error::invalid("render_report", format!("invalid age {age_years}")));
    }
    let tmpl = environment().get_template(TEMPLATE_NAME)?;
    Ok(tmpl.render(context! {
        age => age_years.floor() as u64,
        gender => gender_str(gender),
        rois => triplets,
    })?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedReport {
    pub age: u64,
    pub subject_noun: String,
    pub clauses: Vec<(String, Strength, Polarity)>,
}

/// Structural check of a rendered report: header, then one clause per ROI
/// in atlas order, each naming a strength and an activation direction.
pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let bad = |line: usize, msg: String| Error::format(format!("report line {line}"), msg);
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != N_ROIS + 1 {
        return Err(Error::format(
            "report",
            format!("expected {} lines, got {}", N_ROIS + 1, lines.len()),
        ));
    }
    let header = lines[0]
        .strip_prefix("This ")
        .and_then(|s| s.strip_suffix(" presents the following regional activity profile."))
        .ok_or_else(|| bad(1, format!("malformed header {:?}", lines[0])))?;
    let (age, noun) = header
        .split_once("-year-old ")
        .ok_or_else(|| bad(1, "missing age phrase".into()))?;
    let age: u64 = age.parse().map_err(|_| bad(1, format!("bad age {age:?}")))?;
    if !["boy", "girl", "man", "woman"].contains(&noun) {
        return Err(bad(1, format!("unexpected subject noun {noun:?}")));
    }
    let table = aal_table();
    let mut clauses = Vec::with_capacity(N_ROIS);
    for (i, line) in lines[1..].iter().enumerate() {
        let body = line
            .strip_prefix("The ")
            .and_then(|s| s.strip_suffix('.'))
            .ok_or_else(|| bad(i + 2, format!("malformed clause {line:?}")))?;
        let (name, rest) = body
            .rsplit_once(" shows ")
            .ok_or_else(|| bad(i + 2, "missing 'shows'".into()))?;
        if name != table[i].name {
            return Err(bad(i + 2, format!("expected ROI {:?}, found {name:?}", table[i].name)));
        }
        let (strength, kind) = rest
            .split_once(' ')
            .ok_or_else(|| bad(i + 2, format!("malformed predicate {rest:?}")))?;
        let strength: Strength = strength.parse()?;
        let polarity = match kind {
            "activation" => Polarity::Up,
            "de-activation" => Polarity::Down,
            other => return Err(bad(i + 2, format!("unexpected activity word {other:?}"))),
        };
        clauses.push((name.to_string(), strength, polarity));
    }
    Ok(ParsedReport {
        age,
        subject_noun: noun.to_string(),
        clauses,
    })
}
