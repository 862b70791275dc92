//! Box-plot statistics over alignment records: per example, per head and
//! per path length.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AlignmentRecord, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile of sorted data by piecewise-linear interpolation between order
/// statistics placed at `(i - 0.5) / n`, clamped at the extremes.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = n as f64 * p + 0.5;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor();
    let i = lo as usize - 1;
    sorted[i] + (h - lo) * (sorted[i + 1] - sorted[i])
}

impl Stats {
    /// None for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

/// How several records of one example (heads, tools) fold into one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for HeadAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadAggregation::Mean),
            "max" => Ok(HeadAggregation::Max),
            _ => Err(Error::InvalidConfig(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// One example's score for one metric (one path, for path metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub metric: MetricKind,
    pub path_id: Option<u32>,
    /// Records folded into this score.
    pub records: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryView {
    Example,
    Head,
    PathLength,
}

impl fmt::Display for SummaryView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SummaryView::Example => "example",
            SummaryView::Head => "head",
            SummaryView::PathLength => "path_length",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub dataset: String,
    pub metric: MetricKind,
    pub view: SummaryView,
    pub layer: Option<u32>,
    pub head: Option<u32>,
    pub path_len: Option<u32>,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub examples: Vec<ExampleScore>,
    pub rows: Vec<SummaryRow>,
}

/// Folds records into per-example scores. Tools are always averaged; layers
/// and heads follow `heads`. Each path of an example is a separate unit.
pub fn example_scores(records: &[AlignmentRecord], heads: HeadAggregation) -> Vec<ExampleScore> {
    let mut groups: BTreeMap<(&str, MetricKind, Option<u32>), Vec<&AlignmentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.example_id, r.metric, r.path_id)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((id, metric, path_id), rs)| {
            let has_heads = rs.iter().any(|r| r.layer.is_some() || r.head.is_some());
            // summed in sorted order so the result does not depend on record order
            let mut v: Vec<f64> = rs.iter().map(|r| r.score).collect();
            v.sort_by(f64::total_cmp);
            let score = if has_heads && heads == HeadAggregation::Max {
                v[v.len() - 1]
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            };
            ExampleScore {
                example_id: id.to_owned(),
                metric,
                path_id,
                records: rs.len(),
                score,
            }
        })
        .collect()
}

fn row(run: &str, dataset: &str, metric: MetricKind, view: SummaryView, stats: Stats) -> SummaryRow {
    SummaryRow {
        run: run.to_owned(),
        dataset: dataset.to_owned(),
        metric,
        view,
        layer: None,
        head: None,
        path_len: None,
        count: stats.count,
        mean: stats.mean,
        median: stats.median,
        q1: stats.q1,
        q3: stats.q3,
        min: stats.min,
        max: stats.max,
    }
}

/// Per-example, per-head and per-path-length views for one (run, dataset).
pub fn aggregate_records(
    records: &[AlignmentRecord],
    heads: HeadAggregation,
    run: &str,
    dataset: &str,
) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyReport("no alignment records"));
    }
    let examples = example_scores(records, heads);
    let mut rows = Vec::new();

    let mut by_metric: BTreeMap<MetricKind, Vec<f64>> = BTreeMap::new();
    for e in &examples {
        by_metric.entry(e.metric).or_default().push(e.score);
    }
    for (metric, v) in by_metric {
        if let Some(s) = Stats::from_values(&v) {
            rows.push(row(run, dataset, metric, SummaryView::Example, s));
        }
    }

    let mut by_head: BTreeMap<(MetricKind, u32, u32), Vec<f64>> = BTreeMap::new();
    let mut by_len: BTreeMap<(MetricKind, u32), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (Some(l), Some(h)) = (r.layer, r.head) {
            by_head.entry((r.metric, l, h)).or_default().push(r.score);
        }
        if let Some(len) = r.path_len {
            by_len.entry((r.metric, len)).or_default().push(r.score);
        }
    }
    for ((metric, l, h), v) in by_head {
        if let Some(s) = Stats::from_values(&v) {
            rows.push(SummaryRow {
                layer: Some(l),
                head: Some(h),
                ..row(run, dataset, metric, SummaryView::Head, s)
            });
        }
    }
    for ((metric, len), v) in by_len {
        if let Some(s) = Stats::from_values(&v) {
            rows.push(SummaryRow {
                path_len: Some(len),
                ..row(run, dataset, metric, SummaryView::PathLength, s)
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.metric, a.view, a.layer, a.head, a.path_len).cmp(&(b.metric, b.view, b.layer, b.head, b.path_len))
    });
    Ok(Summary { examples, rows })
}
