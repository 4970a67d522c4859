//! On-disk cohorts: `manifest.json`, `atlas_layout.json` and one binary
//! array per subject.
//!
//! Array files start with a 16-byte header: the magic `RTGA`, a dtype tag
//! (1 = f64), the rank (≤ 5) and five little-endian u16 extents (unused
//! trailing extents are 0), followed by the little-endian f64 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cohort::{CohortSpec, Gender, Label, Subject};
use super::layout::AtlasLayout;
use crate::error::{Error, Result};
use crate::N_ROIS;

pub const ARRAY_MAGIC: [u8; 4] = *b"RTGA";
pub const DTYPE_F64: u8 = 1;
pub const MAX_RANK: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYOUT_FILE: &str = "atlas_layout.json";
const MANIFEST_VERSION: u32 = 1;

pub fn encode_array(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid("encode_array", format!("rank must be 1..={MAX_RANK}, got {}", shape.len())));
    }
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("encode_array", shape, &[data.len()]));
    }
    let mut out = Vec::with_capacity(16 + 8 * data.len());
    out.extend_from_slice(&ARRAY_MAGIC);
    out.push(DTYPE_F64);
    out.push(shape.len() as u8);
    for i in 0..MAX_RANK {
        let e = shape.get(i).copied().unwrap_or(0);
        let e = u16::try_from(e)
            .map_err(|_| Error::invalid("encode_array", format!("extent {e} exceeds {}", u16::MAX)))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], context: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let fail = |msg: String| Err(Error::format(context, msg));
    if bytes.len() < 16 {
        return fail(format!("file is {} bytes, shorter than the 16-byte header", bytes.len()));
    }
    if bytes[..4] != ARRAY_MAGIC {
        return fail(format!("bad magic {:?}", &bytes[..4]));
    }
    if bytes[4] != DTYPE_F64 {
        return fail(format!("unsupported dtype tag {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return fail(format!("rank {rank} out of range"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([bytes[6 + 2 * i], bytes[7 + 2 * i]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 8 * n {
        return fail(format!("shape {shape:?} needs {} payload bytes, found {}", 8 * n, bytes.len() - 16));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((shape, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub file: String,
    pub age_years: f64,
    pub gender: Gender,
    pub site_id: usize,
    pub label: Label,
    pub clean_delta_bold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator_version: String,
    pub spec: CohortSpec,
    pub seed: u64,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub layout: AtlasLayout,
    pub subjects: Vec<Subject>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_cohort(dir: &Path, spec: &CohortSpec, layout: &AtlasLayout, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(subjects.len());
    for s in subjects {
        let file = format!("{}.bin", s.subject_id);
        let bytes = encode_array(&[N_ROIS, s.voxels, s.timepoints], &s.roi_series)?;
        write(&dir.join(&file), &bytes)?;
        records.push(SubjectRecord {
            subject_id: s.subject_id.clone(),
            file,
            age_years: s.age_years,
            gender: s.gender,
            site_id: s.site_id,
            label: s.label,
            clean_delta_bold: s.clean_delta_bold.clone(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        seed: spec.seed,
        subjects: records,
    };
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write(&dir.join(LAYOUT_FILE), serde_json::to_string_pretty(layout)?.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "cohort directory not found"),
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    manifest.spec.validate()?;
    Ok(manifest)
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest = read_manifest(dir)?;
    let layout_path = dir.join(LAYOUT_FILE);
    let layout: AtlasLayout = serde_json::from_str(&read_text(&layout_path)?)
        .map_err(|e| Error::format(layout_path.display().to_string(), e.to_string()))?;
    layout.validate()?;
    let spec = manifest.spec;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for rec in manifest.subjects {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, roi_series) = decode_array(&bytes, &path.display().to_string())?;
        if shape.len() != 3 || shape[0] != N_ROIS {
            return Err(Error::format(
                path.display().to_string(),
                format!("expected [{N_ROIS}, V, T] array, got {shape:?}"),
            ));
        }
        let subject = Subject {
            subject_id: rec.subject_id,
            age_years: rec.age_years,
            gender: rec.gender,
            site_id: rec.site_id,
            label: rec.label,
            voxels: shape[1],
            timepoints: shape[2],
            roi_series,
            clean_delta_bold: rec.clean_delta_bold,
        };
        subject.validate()?;
        subjects.push(subject);
    }
    Ok(Cohort { spec, layout, subjects })
}
