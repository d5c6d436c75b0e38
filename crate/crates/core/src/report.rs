//! Markdown and CSV rendering of metric and rating tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::humaneval::{AggregateReport, Dimension, TaskGroup};
use crate::stats::{write_comparison_csv, ComparisonRow, Marker};

pub const FOOTNOTE: &str = "* p<0.05, † p<0.0001 (after Bonferroni correction)";
pub const EMPTY_CELL: &str = "—";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("no result for task {task}, model {model}")]
    MissingCell { task: String, model: String },
    #[error("reference model {0} is not among the columns")]
    MissingReference(String),
    #[error("no models to render")]
    NoModels,
    #[error("csv: {0}")]
    Csv(String),
}

/// Rounds half away from zero. The small nudge absorbs binary
/// representation error, so 0.145 rounds to 0.15.
pub fn round_half_away(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let r = ((x.abs() * scale) + 0.5 + 1e-9).floor() / scale;
    if r == 0.0 {
        0.0
    } else {
        r.copysign(x)
    }
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round_half_away(x, 2))
}

/// `0.20 ± 0.03 (0.15, 0.25)` followed by the significance marker.
pub fn format_cell(mean: f64, sd: f64, ci_low: f64, ci_high: f64, marker: Marker) -> String {
    format!(
        "{} ± {} ({}, {}){}",
        fmt2(mean),
        fmt2(sd),
        fmt2(ci_low),
        fmt2(ci_high),
        marker.symbol()
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationGroup {
    Internal,
    External,
}

impl ValidationGroup {
    pub fn label(self) -> &'static str {
        match self {
            ValidationGroup::Internal => "Internal validation",
            ValidationGroup::External => "External validation",
        }
    }
}

/// One table row: results whose `task` equals `task` are shown under the
/// display `label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub group: ValidationGroup,
    pub task: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub markdown: String,
    pub csv: String,
    /// Cells rendered as empty, as `group/model/dimension`.
    pub flagged: Vec<String>,
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

/// Reference column first, then `models` in the given order; rows grouped
/// into internal and external validation blocks.
pub fn render_metric_table(
    rows: &[TableRow],
    reference: &str,
    models: &[String],
    results: &[ComparisonRow],
) -> Result<RenderedTable, ReportError> {
    if !models.iter().any(|m| m == reference) {
        return Err(ReportError::MissingReference(reference.to_string()));
    }
    let mut columns = vec![reference.to_string()];
    columns.extend(models.iter().filter(|m| *m != reference).cloned());
    let index: BTreeMap<(&str, &str), &ComparisonRow> =
        results.iter().map(|r| ((r.task.as_str(), r.model.as_str()), r)).collect();

    let mut md = String::new();
    let mut header = vec!["Task (Evaluation Metric)".to_string()];
    header.extend(columns.iter().cloned());
    md.push_str(&md_row(&header));
    md.push_str(&md_rule(header.len()));

    let mut ordered = Vec::new();
    let mut groups: Vec<ValidationGroup> = rows.iter().map(|r| r.group).collect();
    groups.sort();
    groups.dedup();
    for g in groups {
        let mut label_row = vec![format!("**{}**", g.label())];
        label_row.extend(std::iter::repeat_n(String::new(), columns.len()));
        md.push_str(&md_row(&label_row));
        for row in rows.iter().filter(|r| r.group == g) {
            let mut cells = vec![row.label.clone()];
            for model in &columns {
                let r = index.get(&(row.task.as_str(), model.as_str())).ok_or_else(|| ReportError::MissingCell {
                    task: row.task.clone(),
                    model: model.clone(),
                })?;
                let marker = if model == reference { Marker::None } else { r.marker };
                cells.push(format_cell(r.mean, r.sd, r.ci_low, r.ci_high, marker));
                ordered.push((*r).clone());
            }
            md.push_str(&md_row(&cells));
        }
    }
    md.push('\n');
    md.push_str(FOOTNOTE);
    md.push('\n');

    let mut buf = Vec::new();
    write_comparison_csv(&mut buf, &ordered).map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(RenderedTable {
        markdown: md,
        csv: String::from_utf8(buf).expect("csv is utf-8"),
        flagged: Vec::new(),
    })
}

/// Two-decimal means per task group and dimension; cells with no ratings
/// show a dash and are listed in `flagged`.
pub fn render_rating_table(report: &AggregateReport, models: Option<&[String]>) -> Result<RenderedTable, ReportError> {
    let columns: Vec<String> = models.map(<[String]>::to_vec).unwrap_or_else(|| report.models.clone());
    if columns.is_empty() {
        return Err(ReportError::NoModels);
    }
    let mut md = String::new();
    let mut header = vec![String::new()];
    header.extend(columns.iter().cloned());
    md.push_str(&md_row(&header));
    md.push_str(&md_rule(header.len()));

    let mut csv = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ReportError::Csv(e.to_string());
    csv.write_record(["task_group", "model", "dimension", "mean", "n_ratings"]).map_err(err)?;
    let mut flagged = Vec::new();

    for group in TaskGroup::ALL.into_iter().filter(|g| report.groups().contains(g)) {
        let mut label_row = vec![format!("**{}**", group.label())];
        label_row.extend(std::iter::repeat_n(String::new(), columns.len()));
        md.push_str(&md_row(&label_row));
        for dim in Dimension::ALL {
            let mut cells = vec![dim.label().to_string()];
            for model in &columns {
                let cell = report.cell(group, model, dim);
                let mean = cell.and_then(|c| c.mean);
                match mean {
                    Some(m) => cells.push(fmt2(m)),
                    None => {
                        cells.push(EMPTY_CELL.to_string());
                        flagged.push(format!("{}/{}/{}", group.label(), model, dim.label()));
                    }
                }
                csv.write_record([
                    group.label().to_string(),
                    model.clone(),
                    dim.label().to_string(),
                    mean.map(|m| format!("{m:.6}")).unwrap_or_default(),
                    cell.map_or(0, |c| c.n_ratings).to_string(),
                ])
                .map_err(err)?;
            }
            md.push_str(&md_row(&cells));
        }
    }
    let csv = String::from_utf8(csv.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?).expect("utf-8");
    Ok(RenderedTable {
        markdown: md,
        csv,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_formats() {
        assert_eq!(format_cell(0.20, 0.03, 0.15, 0.25, Marker::None), "0.20 ± 0.03 (0.15, 0.25)");
        assert_eq!(format_cell(0.08, 0.01, 0.06, 0.09, Marker::Dagger), "0.08 ± 0.01 (0.06, 0.09)†");
        assert_eq!(format_cell(0.19, 0.02, 0.16, 0.22, Marker::Star), "0.19 ± 0.02 (0.16, 0.22)*");
        assert_eq!(format_cell(0.0, 0.0, 0.0, 0.0, Marker::None), "0.00 ± 0.00 (0.00, 0.00)");
    }

    #[test]
    fn rounding_half_away_from_zero() {
        assert_eq!(fmt2(0.125), "0.13");
        assert_eq!(fmt2(0.145), "0.15");
        assert_eq!(fmt2(-0.125), "-0.13");
        assert_eq!(fmt2(-0.001), "0.00");
        assert_eq!(fmt2(4.4814814814), "4.48");
    }
}
