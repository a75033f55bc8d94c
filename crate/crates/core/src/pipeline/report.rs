use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::ProtocolKind;
use crate::dataio::Category;
use crate::scaling::ScalingFit;
use crate::stats::{Metric, SignificanceMatrix};

/// Full task or one of its evaluation subsets.
pub const ALL_LABELS: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub subset: String,
    pub metric: Metric,
    pub protocol: ProtocolKind,
    pub model_id: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_valid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub task: String,
    pub subset: String,
    pub metric: Metric,
    pub protocol: ProtocolKind,
    pub matrix: SignificanceMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub task: String,
    pub subset: String,
    pub metric: Metric,
    pub protocol: ProtocolKind,
    pub category: Category,
    pub model_id: String,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRankRow {
    pub model_id: String,
    pub protocol: ProtocolKind,
    pub category: Category,
    pub median_rank: f64,
    pub n_tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub model_id: String,
    pub reference_id: String,
    pub n: f64,
    pub n_star: Option<f64>,
    pub r: Option<f64>,
    /// `ok`, `saturated` or `flat_curve`.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model_id: String,
    pub n: usize,
    pub loss: f64,
    pub fitted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub crate_version: String,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub ledger_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub environment: Environment,
    pub metrics: Vec<MetricRow>,
    pub significance: Vec<SignificanceEntry>,
    pub ranks: Vec<RankRow>,
    pub median_ranks: Vec<MedianRankRow>,
    pub scaling_fits: Vec<ScalingFit>,
    pub label_efficiency: Vec<EfficiencyRow>,
}

type RowKey = (String, String, Metric);

fn row_key(task: &str, subset: &str, metric: Metric) -> RowKey {
    (task.to_string(), subset.to_string(), metric)
}

/// Per protocol, one row per task and metric and one column per model. The
/// best model of a row is bold and underlined; every model sharing its rank
/// is bold.
pub fn render_markdown(report: &BenchmarkReport) -> String {
    let mut out = String::from("# Benchmark results\n");
    let models: Vec<&str> = {
        let mut seen = Vec::new();
        for m in &report.metrics {
            if !seen.contains(&m.model_id.as_str()) {
                seen.push(m.model_id.as_str());
            }
        }
        seen
    };
    let protocols: BTreeSet<&str> = report.metrics.iter().map(|m| m.protocol.as_str()).collect();
    let ranks: BTreeMap<(RowKey, &str, &str), usize> = report
        .ranks
        .iter()
        .map(|r| ((row_key(&r.task, &r.subset, r.metric), r.protocol.as_str(), r.model_id.as_str()), r.rank))
        .collect();
    for protocol in protocols {
        let _ = writeln!(out, "\n## {protocol}\n");
        let _ = writeln!(out, "| task | subset | metric | {} |", models.join(" | "));
        let _ = writeln!(out, "|---|---|---|{}", "---|".repeat(models.len()));
        let mut rows: BTreeMap<RowKey, Vec<&MetricRow>> = BTreeMap::new();
        for m in report.metrics.iter().filter(|m| m.protocol.as_str() == protocol) {
            rows.entry(row_key(&m.task, &m.subset, m.metric)).or_default().push(m);
        }
        for (key, cells) in rows {
            let leader = best_in_row(&cells, &ranks, &key, protocol);
            let mut line = format!("| {} | {} | {} |", key.0, key.1, key.2.as_str());
            for &model in &models {
                let Some(c) = cells.iter().find(|c| c.model_id == model) else {
                    line.push_str(" - |");
                    continue;
                };
                let text = format!("{:.3} [{:.3}, {:.3}]", c.point, c.lower, c.upper);
                let rank = ranks.get(&(key.clone(), protocol, model)).copied();
                let cell = if Some(model) == leader {
                    format!("<u>**{text}**</u>")
                } else if rank == Some(1) {
                    format!("**{text}**")
                } else {
                    text
                };
                let _ = write!(line, " {cell} |");
            }
            let _ = writeln!(out, "{line}");
        }
    }
    out
}

/// Best point estimate among the rank-1 models, ties broken by model id.
fn best_in_row<'a>(
    cells: &[&'a MetricRow],
    ranks: &BTreeMap<(RowKey, &str, &str), usize>,
    key: &RowKey,
    protocol: &str,
) -> Option<&'a str> {
    cells
        .iter()
        .filter(|c| ranks.get(&(key.clone(), protocol, c.model_id.as_str())) == Some(&1))
        .min_by(|a, b| {
            let (pa, pb) = if a.metric.higher_is_better() { (-a.point, -b.point) } else { (a.point, b.point) };
            pa.total_cmp(&pb).then_with(|| a.model_id.cmp(&b.model_id))
        })
        .map(|c| c.model_id.as_str())
}

/// Median ranks with one row per model and protocol and one column per
/// category.
pub fn radar_rows(rows: &[MedianRankRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let cats: BTreeSet<&str> = rows.iter().map(|r| r.category.as_str()).collect();
    let mut header = vec!["model_id".to_string(), "protocol".to_string()];
    header.extend(cats.iter().map(|c| c.to_string()));
    let mut by_model: BTreeMap<(&str, &str), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in rows {
        by_model
            .entry((r.model_id.as_str(), r.protocol.as_str()))
            .or_default()
            .insert(r.category.as_str(), r.median_rank);
    }
    let body = by_model
        .into_iter()
        .map(|((m, p), cells)| {
            let mut row = vec![m.to_string(), p.to_string()];
            row.extend(cats.iter().map(|c| cells.get(c).map(|v| v.to_string()).unwrap_or_default()));
            row
        })
        .collect();
    (header, body)
}
