use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::N_ROIS;

const AAL_TSV: &str = include_str!("../../data/aal116.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AalEntry {
    pub index: usize,
    /// Short atlas label, e.g. `Precentral_L`.
    pub label: String,
    /// Readable English name, e.g. `left precentral gyrus`.
    pub name: String,
}

pub fn parse_aal_table(text: &str) -> Result<Vec<AalEntry>> {
    let mut entries = Vec::with_capacity(N_ROIS);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = || format!("aal table line {}", lineno + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(ctx(), format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| Error::format(ctx(), format!("bad index {:?}", cols[0])))?;
        if index != entries.len() {
            return Err(Error::format(ctx(), format!("index {index} out of order")));
        }
        entries.push(AalEntry {
            index,
            label: cols[1].to_string(),
            name: cols[2].to_string(),
        });
    }
    if entries.len() != N_ROIS {
        return Err(Error::format("aal table", format!("expected {N_ROIS} entries, got {}", entries.len())));
    }
    Ok(entries)
}

/// The shipped 116-region table.
pub fn aal_table() -> &'static [AalEntry] {
    static TABLE: OnceLock<Vec<AalEntry>> = OnceLock::new();
    TABLE.get_or_init(|| parse_aal_table(AAL_TSV).expect("shipped AAL table is well-formed"))
}

pub fn roi_name(index: usize) -> Result<&'static str> {
    aal_table()
        .get(index)
        .map(|e| e.name.as_str())
        .ok_or_else(|| Error::invalid("roi_name", format!("ROI index {index} outside [0, {N_ROIS})")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shape_and_hemisphere_parity() {
        let t = aal_table();
        assert_eq!(t.len(), N_ROIS);
        for e in &t[..108] {
            let suffix = if e.index % 2 == 0 { "_L" } else { "_R" };
            assert!(e.label.ends_with(suffix), "{e:?}");
        }
        assert_eq!(roi_name(0).unwrap(), "left precentral gyrus");
        assert!(roi_name(116).is_err());
    }

    #[test]
    fn malformed_tables_rejected() {
        assert!(parse_aal_table("0\tA\n").is_err());
        assert!(parse_aal_table("1\tA\ta\n").is_err());
    }
}
