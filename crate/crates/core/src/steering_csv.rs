//! Steering CSV interchange format.
//!
//! Required columns: `sae_release`, `sae_id`, `latent_idx`,
//! `steering_coefficient`. Optional: `hook_action` (defaults to `clamp`),
//! `clamp_value`, `refusal_id` (also read as `refuse_id`). Known auxiliary
//! columns are `description` and `url`; any other column is carried through
//! untouched. Empty cells in optional columns mean "absent".

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sae::SparseAutoencoder;
use crate::steering::{HookAction, SteeringRow, SteeringSpec};

pub const REQUIRED_COLUMNS: [&str; 4] = ["sae_release", "sae_id", "latent_idx", "steering_coefficient"];

/// Column order used for documents built from rows.
pub const CANONICAL_COLUMNS: [&str; 9] = [
    "latent_idx",
    "hook_action",
    "refusal_id",
    "clamp_value",
    "steering_coefficient",
    "sae_id",
    "sae_release",
    "description",
    "url",
];

const REFUSAL_ALIAS: &str = "refuse_id";

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDocument {
    /// Column names as written, with `refuse_id` normalized to `refusal_id`.
    pub header: Vec<String>,
    pub rows: Vec<SteeringRow>,
    /// One map per row holding columns the format does not know.
    pub unknown_columns: Vec<BTreeMap<String, String>>,
}

impl SteeringDocument {
    /// Document with the canonical header and no extra columns.
    pub fn from_rows(rows: Vec<SteeringRow>) -> Self {
        let unknown_columns = vec![BTreeMap::new(); rows.len()];
        Self {
            header: CANONICAL_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows,
            unknown_columns,
        }
    }

    pub fn spec(&self) -> SteeringSpec {
        SteeringSpec::new(self.rows.clone())
    }
}

fn is_known(column: &str) -> bool {
    CANONICAL_COLUMNS.contains(&column)
}

fn format_err(row: Option<usize>, message: impl Into<String>) -> Error {
    Error::Format {
        row,
        message: message.into(),
    }
}

fn parse_number<T: std::str::FromStr>(cell: &str, column: &str, row: usize) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| format_err(Some(row), format!("{column} value {cell:?} is not a valid number")))
}

fn optional<'a>(cell: Option<&'a str>) -> Option<&'a str> {
    cell.filter(|c| !c.trim().is_empty())
}

/// Parses a Steering CSV. Row numbers in errors count data rows from 1.
pub fn parse_steering_csv(text: &str) -> Result<SteeringDocument> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let raw_header = reader
        .headers()
        .map_err(|e| format_err(None, format!("unreadable header: {e}")))?
        .clone();
    let header: Vec<String> = raw_header
        .iter()
        .map(|h| {
            let h = h.trim();
            if h == REFUSAL_ALIAS { "refusal_id".to_string() } else { h.to_string() }
        })
        .collect();
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(format_err(None, format!("duplicate column {h:?}")));
        }
    }
    for required in REQUIRED_COLUMNS {
        if !header.iter().any(|h| h == required) {
            return Err(format_err(None, format!("missing required column {required:?}")));
        }
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let c_idx = col("latent_idx").expect("checked");
    let c_coef = col("steering_coefficient").expect("checked");
    let c_release = col("sae_release").expect("checked");
    let c_id = col("sae_id").expect("checked");
    let c_action = col("hook_action");
    let c_clamp = col("clamp_value");
    let c_refusal = col("refusal_id");
    let c_desc = col("description");
    let c_url = col("url");

    let mut rows = Vec::new();
    let mut unknown_columns = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let n = i + 1;
        let record = record.map_err(|e| format_err(Some(n), e.to_string()))?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let hook_action = match c_action.map(cell).filter(|c| !c.trim().is_empty()) {
            None => HookAction::Clamp,
            Some(a) => a
                .trim()
                .parse()
                .map_err(|_| format_err(Some(n), format!("unknown hook_action {a:?}")))?,
        };
        let row = SteeringRow {
            latent_idx: parse_number(cell(c_idx), "latent_idx", n)?,
            hook_action,
            steering_coefficient: parse_number(cell(c_coef), "steering_coefficient", n)?,
            sae_id: cell(c_id).to_string(),
            sae_release: cell(c_release).to_string(),
            clamp_value: optional(c_clamp.map(cell))
                .map(|v| parse_number(v, "clamp_value", n))
                .transpose()?,
            refusal_id: optional(c_refusal.map(cell))
                .map(|v| parse_number(v, "refusal_id", n))
                .transpose()?,
            description: optional(c_desc.map(cell)).map(str::to_string),
            url: optional(c_url.map(cell)).map(str::to_string),
        };
        row.validate()?;
        let extra: BTreeMap<String, String> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| !is_known(h))
            .map(|(c, h)| (h.clone(), cell(c).to_string()))
            .collect();
        rows.push(row);
        unknown_columns.push(extra);
    }
    Ok(SteeringDocument {
        header,
        rows,
        unknown_columns,
    })
}

fn needed_columns(doc: &SteeringDocument) -> Vec<String> {
    let mut header = doc.header.clone();
    let mut need = |name: &str, used: bool| {
        if used && !header.iter().any(|h| h == name) {
            header.push(name.to_string());
        }
    };
    for name in REQUIRED_COLUMNS {
        need(name, true);
    }
    need("hook_action", doc.rows.iter().any(|r| r.hook_action != HookAction::Clamp));
    need("refusal_id", doc.rows.iter().any(|r| r.refusal_id.is_some()));
    need("clamp_value", doc.rows.iter().any(|r| r.clamp_value.is_some()));
    need("description", doc.rows.iter().any(|r| r.description.is_some()));
    need("url", doc.rows.iter().any(|r| r.url.is_some()));
    let mut extra: Vec<&String> = doc.unknown_columns.iter().flat_map(|m| m.keys()).collect();
    extra.sort();
    extra.dedup();
    for name in extra {
        need(name, true);
    }
    header
}

/// Serializes in the document's column order, appending any column a row
/// needs that the header lacks. Numbers use shortest round-trip decimals.
pub fn write_steering_csv(doc: &SteeringDocument) -> Result<String> {
    let header = needed_columns(doc);
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| format_err(None, e.to_string());
    writer.write_record(&header).map_err(csv_err)?;
    let empty = BTreeMap::new();
    for (i, row) in doc.rows.iter().enumerate() {
        let extra = doc.unknown_columns.get(i).unwrap_or(&empty);
        let cells: Vec<String> = header
            .iter()
            .map(|h| match h.as_str() {
                "latent_idx" => row.latent_idx.to_string(),
                "hook_action" => row.hook_action.to_string(),
                "refusal_id" => row.refusal_id.map(|v| v.to_string()).unwrap_or_default(),
                "clamp_value" => row.clamp_value.map(|v| v.to_string()).unwrap_or_default(),
                "steering_coefficient" => row.steering_coefficient.to_string(),
                "sae_id" => row.sae_id.clone(),
                "sae_release" => row.sae_release.clone(),
                "description" => row.description.clone().unwrap_or_default(),
                "url" => row.url.clone().unwrap_or_default(),
                other => extra.get(other).cloned().unwrap_or_default(),
            })
            .collect();
        writer.write_record(&cells).map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| format_err(None, e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| format_err(None, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    LatentOutOfRange { row: usize, latent_idx: usize, d_sae: usize },
    RefusalOutOfRange { row: usize, refusal_id: usize, d_sae: usize },
    Provenance { row: usize, sae_release: String, sae_id: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::LatentOutOfRange { row, latent_idx, d_sae } => {
                write!(f, "row {row}: latent_idx {latent_idx} is outside d_sae {d_sae}")
            }
            Finding::RefusalOutOfRange { row, refusal_id, d_sae } => {
                write!(f, "row {row}: refusal_id {refusal_id} is outside d_sae {d_sae}")
            }
            Finding::Provenance { row, sae_release, sae_id } => {
                write!(f, "row {row}: references ({sae_release}, {sae_id}), not the loaded SAE")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Rows (numbered from 1) that do not fit `sae`.
pub fn validate_against_sae(doc: &SteeringDocument, sae: &SparseAutoencoder) -> ValidationReport {
    let d_sae = sae.d_sae();
    let mut findings = Vec::new();
    for (i, r) in doc.rows.iter().enumerate() {
        let row = i + 1;
        if r.sae_release != sae.release || r.sae_id != sae.sae_id {
            findings.push(Finding::Provenance {
                row,
                sae_release: r.sae_release.clone(),
                sae_id: r.sae_id.clone(),
            });
        }
        if r.latent_idx >= d_sae {
            findings.push(Finding::LatentOutOfRange {
                row,
                latent_idx: r.latent_idx,
                d_sae,
            });
        }
        if let Some(refusal_id) = r.refusal_id.filter(|&id| id >= d_sae) {
            findings.push(Finding::RefusalOutOfRange { row, refusal_id, d_sae });
        }
    }
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "sae_release,sae_id,latent_idx,steering_coefficient\nrel,id,3,-1.5\n";

    #[test]
    fn missing_hook_action_defaults_to_clamp() {
        let doc = parse_steering_csv(MIN).unwrap();
        assert_eq!(doc.rows.len(), 1);
        assert_eq!(doc.rows[0].hook_action, HookAction::Clamp);
        assert_eq!(doc.rows[0].steering_coefficient, -1.5);
    }

    #[test]
    fn missing_required_column_is_named() {
        let text = "sae_id,latent_idx,steering_coefficient\nid,3,1\n";
        match parse_steering_csv(text) {
            Err(Error::Format { message, .. }) => assert!(message.contains("sae_release"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_row() {
        let text = "sae_release,sae_id,latent_idx,steering_coefficient\nr,i,1,1\nr,i,x,1\n";
        assert!(matches!(parse_steering_csv(text), Err(Error::Format { row: Some(2), .. })));
    }

    #[test]
    fn unknown_action_is_format_error() {
        let text = "sae_release,sae_id,latent_idx,steering_coefficient,hook_action\nr,i,1,1,zap\n";
        assert!(matches!(parse_steering_csv(text), Err(Error::Format { row: Some(1), .. })));
    }

    #[test]
    fn refusal_without_id_is_validation_error() {
        let text = "sae_release,sae_id,latent_idx,steering_coefficient,hook_action,clamp_value\nr,i,1,1,clamp_refusal,0.1\n";
        assert!(matches!(parse_steering_csv(text), Err(Error::Spec(_))));
    }

    #[test]
    fn unknown_columns_survive() {
        let text = "sae_release,sae_id,latent_idx,steering_coefficient,note\nr,i,1,2,\"hello, world\"\n";
        let doc = parse_steering_csv(text).unwrap();
        assert_eq!(doc.unknown_columns[0]["note"], "hello, world");
        let again = parse_steering_csv(&write_steering_csv(&doc).unwrap()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn empty_document_round_trips() {
        let doc = SteeringDocument::from_rows(Vec::new());
        let text = write_steering_csv(&doc).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back = parse_steering_csv(&text).unwrap();
        assert!(back.rows.is_empty());
        assert_eq!(back, doc);
    }

    #[test]
    fn description_column_is_written() {
        let row = SteeringRow::new(1, HookAction::Clamp, -3.0, "r", "i").with_description("a note");
        let text = write_steering_csv(&SteeringDocument::from_rows(vec![row])).unwrap();
        assert!(text.lines().next().unwrap().contains("description"));
        assert!(text.contains("a note"));
    }
}
