//! Plain-text report tables.

use std::collections::BTreeMap;

use super::{AgreementReport, CorrelationReport, Level};
use crate::model::Grounding;

fn grounding_label(g: Grounding) -> &'static str {
    match g {
        Grounding::Referenced => "Referenced",
        Grounding::ReferenceFree => "Reference-Free",
    }
}

/// Left-aligned first column, right-aligned rest, two-space gutters.
pub fn render_table(header: &[Vec<String>], rows: &[Vec<String>]) -> String {
    let cols = header.iter().chain(rows).map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for line in header.iter().chain(rows) {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let fmt_line = |line: &Vec<String>| {
        let cells: Vec<String> = (0..cols)
            .map(|i| {
                let cell = line.get(i).map(String::as_str).unwrap_or("");
                let pad = widths[i] - cell.chars().count();
                if i == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    for line in header {
        out.push_str(&fmt_line(line));
        out.push('\n');
    }
    let rule_len = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for line in rows {
        out.push_str(&fmt_line(line));
        out.push('\n');
    }
    out
}

/// Pointwise results for one evaluator, keyed by level and grounding.
pub type CorrelationCells = BTreeMap<(Level, Grounding), CorrelationReport>;

/// Text/system level x referenced/reference-free x (r, rho, tau).
pub fn correlation_table(rows: &[(String, CorrelationCells)]) -> String {
    let blocks = [
        (Level::Text, Grounding::Referenced),
        (Level::Text, Grounding::ReferenceFree),
        (Level::System, Grounding::Referenced),
        (Level::System, Grounding::ReferenceFree),
    ];
    let mut level_row = vec!["Level".to_string()];
    let mut setting_row = vec!["Setting".to_string()];
    let mut metric_row = vec!["Metric".to_string()];
    for (level, grounding) in blocks {
        let level = match level {
            Level::Text => "Text",
            Level::System => "System",
        };
        for metric in ["r", "rho", "tau"] {
            level_row.push(level.to_string());
            setting_row.push(grounding_label(grounding).to_string());
            metric_row.push(metric.to_string());
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, cells)| {
            let mut line = vec![name.clone()];
            for key in blocks {
                match cells.get(&key) {
                    Some(rep) => line.extend([rep.r, rep.rho, rep.tau].map(|v| format!("{v:.3}"))),
                    None => line.extend(std::iter::repeat_n("-".to_string(), 3)),
                }
            }
            line
        })
        .collect();
    render_table(&[level_row, setting_row, metric_row], &body)
}

/// Pairwise results for one evaluator, keyed by dataset and grounding.
pub type AgreementCells = BTreeMap<(String, Grounding), AgreementReport>;

/// One column group per (dataset, grounding); rates printed as percentages.
pub fn agreement_table(
    columns: &[(String, Grounding)],
    rows: &[(String, AgreementCells)],
) -> String {
    let mut dataset_row = vec!["Dataset".to_string()];
    let mut setting_row = vec!["Setting".to_string()];
    let mut metric_row = vec!["Metric".to_string()];
    for (dataset, grounding) in columns {
        for metric in ["Agr.", "Cons."] {
            dataset_row.push(dataset.clone());
            setting_row.push(grounding_label(*grounding).to_string());
            metric_row.push(metric.to_string());
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, cells)| {
            let mut line = vec![name.clone()];
            for key in columns {
                match cells.get(key) {
                    Some(rep) => {
                        line.push(format!("{:.2}", rep.agreement * 100.0));
                        line.push(format!("{:.2}", rep.consistency * 100.0));
                    }
                    None => line.extend(["-".to_string(), "-".to_string()]),
                }
            }
            line
        })
        .collect();
    render_table(&[dataset_row, setting_row, metric_row], &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let out = render_table(
            &[vec!["name".into(), "value".into()]],
            &[
                vec!["a".into(), "1.0".into()],
                vec!["longer".into(), "10.25".into()],
            ],
        );
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "name    value");
        assert_eq!(lines[2], "a         1.0");
        assert_eq!(lines[3], "longer  10.25");
    }

    #[test]
    fn missing_cells_are_dashes() {
        let mut cells = CorrelationCells::new();
        cells.insert(
            (Level::System, Grounding::ReferenceFree),
            CorrelationReport {
                level: Level::System,
                r: 0.5,
                rho: 1.0,
                tau: 1.0,
                groups_used: 8,
                groups_skipped: 0,
            },
        );
        let out = correlation_table(&[("judge".into(), cells)]);
        let last = out.lines().last().unwrap();
        assert!(last.starts_with("judge"));
        assert_eq!(last.matches('-').count(), 9);
        let tail: Vec<&str> = last.split_whitespace().rev().take(3).collect();
        assert_eq!(tail, ["1.000", "1.000", "0.500"]);
    }
}
