use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::correlation::{is_constant, kendall, pearson, spearman};
use super::MetricError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub query_id: String,
    pub model_id: String,
    pub human_score: f64,
    pub metric_score: f64,
}

/// Human and metric scores keyed by (query, model).
///
/// Rows are stored sorted by `(query_id, model_id)` so every reduction runs
/// in the same order no matter how the input was shuffled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(mut rows: Vec<ScoreRow>) -> Result<Self, MetricError> {
        if rows.is_empty() {
            return Err(MetricError::EmptyTable);
        }
        if rows
            .iter()
            .any(|r| !r.human_score.is_finite() || !r.metric_score.is_finite())
        {
            return Err(MetricError::NonFinite);
        }
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert((r.query_id.as_str(), r.model_id.as_str())) {
                return Err(MetricError::DuplicateRow {
                    query_id: r.query_id.clone(),
                    model_id: r.model_id.clone(),
                });
            }
        }
        rows.sort_by(|a, b| (&a.query_id, &a.model_id).cmp(&(&b.query_id, &b.model_id)));
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    fn grouped_by<'a>(
        &'a self,
        key: impl Fn(&'a ScoreRow) -> &'a str,
    ) -> BTreeMap<&'a str, (Vec<f64>, Vec<f64>)> {
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for row in &self.rows {
            let entry = groups.entry(key(row)).or_default();
            entry.0.push(row.human_score);
            entry.1.push(row.metric_score);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Text,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub level: Level,
    pub r: f64,
    pub rho: f64,
    pub tau: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeighting {
    /// Every query counts once.
    #[default]
    Equal,
    /// Queries weighted by number of scored responses.
    GroupSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextLevelOptions {
    pub min_group: usize,
    pub skip_degenerate: bool,
    pub weighting: GroupWeighting,
}

impl Default for TextLevelOptions {
    fn default() -> Self {
        Self {
            min_group: 2,
            skip_degenerate: true,
            weighting: GroupWeighting::Equal,
        }
    }
}

/// Mean of the per-query correlation coefficients.
///
/// Groups smaller than `min_group` are always skipped. A group whose human
/// or metric vector is constant is skipped when `skip_degenerate` is set and
/// otherwise contributes 0 to all three coefficients.
pub fn text_level(
    table: &ScoreTable,
    options: TextLevelOptions,
) -> Result<CorrelationReport, MetricError> {
    if options.min_group < 2 {
        return Err(MetricError::InvalidMinGroup(options.min_group));
    }
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut weight_sum = 0.0;
    let mut sums = [0.0f64; 3];
    for (human, metric) in table.grouped_by(|r| &r.query_id).into_values() {
        if human.len() < options.min_group {
            skipped += 1;
            continue;
        }
        let coefficients = if is_constant(&human) || is_constant(&metric) {
            if options.skip_degenerate {
                skipped += 1;
                continue;
            }
            [0.0; 3]
        } else {
            [
                pearson(&human, &metric)?,
                spearman(&human, &metric)?,
                kendall(&human, &metric)?,
            ]
        };
        let w = match options.weighting {
            GroupWeighting::Equal => 1.0,
            GroupWeighting::GroupSize => human.len() as f64,
        };
        for (sum, c) in sums.iter_mut().zip(coefficients) {
            *sum += w * c;
        }
        weight_sum += w;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::NoUsableGroups { skipped });
    }
    Ok(CorrelationReport {
        level: Level::Text,
        r: sums[0] / weight_sum,
        rho: sums[1] / weight_sum,
        tau: sums[2] / weight_sum,
        groups_used: used,
        groups_skipped: skipped,
    })
}

/// Correlation between per-model mean human and metric scores.
pub fn system_level(table: &ScoreTable) -> Result<CorrelationReport, MetricError> {
    let groups = table.grouped_by(|r| &r.model_id);
    if groups.len() < 2 {
        return Err(MetricError::TooFewModels(groups.len()));
    }
    let (human, metric): (Vec<f64>, Vec<f64>) = groups
        .values()
        .map(|(h, m)| {
            (
                h.iter().sum::<f64>() / h.len() as f64,
                m.iter().sum::<f64>() / m.len() as f64,
            )
        })
        .unzip();
    Ok(CorrelationReport {
        level: Level::System,
        r: pearson(&human, &metric)?,
        rho: spearman(&human, &metric)?,
        tau: kendall(&human, &metric)?,
        groups_used: groups.len(),
        groups_skipped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(q: &str, m: &str, h: f64, s: f64) -> ScoreRow {
        ScoreRow {
            query_id: q.into(),
            model_id: m.into(),
            human_score: h,
            metric_score: s,
        }
    }

    #[test]
    fn perfect_groups() {
        let table = ScoreTable::new(vec![
            row("q1", "a", 1.0, 2.0),
            row("q1", "b", 2.0, 4.0),
            row("q2", "a", 1.0, 2.0),
            row("q2", "b", 2.0, 4.0),
        ])
        .unwrap();
        let report = text_level(&table, TextLevelOptions::default()).unwrap();
        assert_eq!(report.r, 1.0);
        assert_eq!(report.groups_used, 2);
        assert_eq!(report.groups_skipped, 0);
    }

    #[test]
    fn degenerate_group_policy() {
        let rows = vec![
            row("q1", "a", 1.0, 2.0),
            row("q1", "b", 2.0, 4.0),
            row("q2", "a", 1.0, 5.0),
            row("q2", "b", 2.0, 5.0),
        ];
        let table = ScoreTable::new(rows).unwrap();
        let skip = text_level(&table, TextLevelOptions::default()).unwrap();
        assert_eq!((skip.groups_used, skip.groups_skipped), (1, 1));
        assert_eq!(skip.r, 1.0);

        let zero = text_level(
            &table,
            TextLevelOptions {
                skip_degenerate: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((zero.groups_used, zero.groups_skipped), (2, 0));
        assert_eq!(zero.r, 0.5);
    }

    #[test]
    fn no_usable_groups() {
        let table =
            ScoreTable::new(vec![row("q1", "a", 1.0, 1.0), row("q2", "a", 2.0, 2.0)]).unwrap();
        assert_eq!(
            text_level(&table, TextLevelOptions::default()),
            Err(MetricError::NoUsableGroups { skipped: 2 })
        );
        assert_eq!(
            text_level(
                &table,
                TextLevelOptions {
                    min_group: 1,
                    ..Default::default()
                }
            ),
            Err(MetricError::InvalidMinGroup(1))
        );
    }

    #[test]
    fn group_size_weighting() {
        let table = ScoreTable::new(vec![
            row("q1", "a", 1.0, 1.0),
            row("q1", "b", 2.0, 2.0),
            row("q1", "c", 3.0, 3.0),
            row("q2", "a", 1.0, 2.0),
            row("q2", "b", 2.0, 1.0),
        ])
        .unwrap();
        let eq = text_level(&table, TextLevelOptions::default()).unwrap();
        assert!((eq.r - 0.0).abs() < 1e-12);
        let weighted = text_level(
            &table,
            TextLevelOptions {
                weighting: GroupWeighting::GroupSize,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((weighted.r - (3.0 - 2.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn system_level_means() {
        // per-model human means [3,1,2], metric means [6,2,4]
        let table = ScoreTable::new(vec![
            row("q1", "a", 2.0, 5.0),
            row("q2", "a", 4.0, 7.0),
            row("q1", "b", 1.0, 2.0),
            row("q2", "b", 1.0, 2.0),
            row("q1", "c", 2.0, 4.0),
            row("q2", "c", 2.0, 4.0),
        ])
        .unwrap();
        let report = system_level(&table).unwrap();
        assert!((report.rho - 1.0).abs() < 1e-12);
        assert!((report.r - 1.0).abs() < 1e-12);
        assert_eq!(report.groups_used, 3);

        let one_model = ScoreTable::new(vec![row("q1", "a", 1.0, 1.0)]).unwrap();
        assert_eq!(system_level(&one_model), Err(MetricError::TooFewModels(1)));
    }

    #[test]
    fn table_validation() {
        assert_eq!(ScoreTable::new(vec![]), Err(MetricError::EmptyTable));
        assert!(matches!(
            ScoreTable::new(vec![row("q", "a", 1.0, 1.0), row("q", "a", 2.0, 2.0)]),
            Err(MetricError::DuplicateRow { .. })
        ));
    }
}
