//! Report serialization.
//!
//! CSV writes three files: the records at the given path and the
//! per-example scores and summary rows next to it (`out.csv`,
//! `out.examples.csv`, `out.summary.csv`). JSON writes a single object.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AlignmentRecord;
use crate::summary::{aggregate_records, ExampleScore, HeadAggregation, SummaryRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    /// Guesses from the file extension; CSV unless it is `.json`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run: String,
    pub dataset: String,
    pub records: Vec<AlignmentRecord>,
    pub examples: Vec<ExampleScore>,
    pub summary: Vec<SummaryRow>,
}

impl Report {
    /// Sorts the records and derives the summary views.
    pub fn new(
        run: &str,
        dataset: &str,
        mut records: Vec<AlignmentRecord>,
        heads: HeadAggregation,
    ) -> Result<Report> {
        if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::NonFiniteScore {
                example_id: r.example_id.clone(),
                score: r.score,
            });
        }
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let summary = aggregate_records(&records, heads, run, dataset)?;
        Ok(Report {
            run: run.to_owned(),
            dataset: dataset.to_owned(),
            records,
            examples: summary.examples,
            summary: summary.rows,
        })
    }
}

/// `dir/name.csv` -> `dir/name.<part>.csv`.
pub fn sibling_path(path: &Path, part: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.{part}.{ext}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::EmptyReport("no alignment records"));
    }
    match format {
        ReportFormat::Json => {
            let w = BufWriter::new(fs::File::create(path)?);
            serde_json::to_writer_pretty(w, report)?;
        }
        ReportFormat::Csv => {
            write_csv(path, &report.records)?;
            write_csv(&sibling_path(path, "examples"), &report.examples)?;
            write_csv(&sibling_path(path, "summary"), &report.summary)?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Report> {
    match format {
        ReportFormat::Json => {
            if !path.exists() {
                return Err(Error::MissingFile(path.to_owned()));
            }
            Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
        }
        ReportFormat::Csv => {
            let records = read_csv(path)?;
            let examples = read_csv(&sibling_path(path, "examples"))?;
            let summary: Vec<SummaryRow> = read_csv(&sibling_path(path, "summary"))?;
            let (run, dataset) = summary
                .first()
                .map(|s| (s.run.clone(), s.dataset.clone()))
                .unwrap_or_default();
            Ok(Report {
                run,
                dataset,
                records,
                examples,
                summary,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;
    use crate::summary::SummaryView;
    use proptest::prelude::*;

    fn sample() -> Vec<AlignmentRecord> {
        vec![
            AlignmentRecord {
                layer: Some(1),
                head: Some(0),
                ..AlignmentRecord::new("b", MetricKind::Attention, 3, 0.25)
            },
            AlignmentRecord {
                tool: Some("saliency".into()),
                ..AlignmentRecord::new("a", MetricKind::Interpret, 3, 0.5)
            },
            AlignmentRecord {
                path_id: Some(2),
                path_len: Some(4),
                ..AlignmentRecord::new("a", MetricKind::JointProb, 0, 1.0 / 3.0)
            },
        ]
    }

    #[test]
    fn one_record_gives_one_row_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rep = Report::new("run", "d2a", sample()[..1].to_vec(), HeadAggregation::Mean).unwrap();
        write_report(&rep, &path, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            "example_id,metric,tool,layer,head,path_id,path_len,k,score"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "b,attention,,1,0,,,3,0.25");
        let summary = fs::read_to_string(sibling_path(&path, "summary")).unwrap();
        assert!(summary.lines().nth(1).unwrap().starts_with("run,d2a,attention,example,,,,1,0.25"));
    }

    #[test]
    fn rows_are_sorted() {
        let rep = Report::new("r", "d", sample(), HeadAggregation::Mean).unwrap();
        let ids: Vec<_> = rep.records.iter().map(|r| (r.example_id.as_str(), r.metric)).collect();
        assert_eq!(
            ids,
            [("a", MetricKind::Interpret), ("a", MetricKind::JointProb), ("b", MetricKind::Attention)]
        );
        assert!(rep.summary.iter().any(|s| s.view == SummaryView::PathLength));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let bad = vec![AlignmentRecord::new("x", MetricKind::Interaction, 1, f64::NAN)];
        assert!(matches!(
            Report::new("r", "d", bad, HeadAggregation::Mean),
            Err(Error::NonFiniteScore { .. })
        ));
        assert!(matches!(
            Report::new("r", "d", vec![], HeadAggregation::Mean),
            Err(Error::EmptyReport(_))
        ));
    }

    #[test]
    fn format_from_path() {
        assert_eq!(ReportFormat::from_path(Path::new("a/b.JSON")), ReportFormat::Json);
        assert_eq!(ReportFormat::from_path(Path::new("a/b.csv")), ReportFormat::Csv);
        assert_eq!(sibling_path(Path::new("a/b.csv"), "summary"), Path::new("a/b.summary.csv"));
    }

    fn record_strategy() -> impl Strategy<Value = AlignmentRecord> {
        (
            0u8..4,
            0usize..MetricKind::ALL.len(),
            proptest::option::of("[a-z]{1,6}"),
            proptest::option::of(0u32..12),
            proptest::option::of(0u32..12),
            proptest::option::of(0u32..5),
            0u32..20,
            -1e3f64..1e3,
        )
            .prop_map(|(id, m, tool, layer, head, path, k, score)| AlignmentRecord {
                tool,
                layer,
                head,
                path_id: path,
                path_len: path.map(|p| p + 2),
                ..AlignmentRecord::new(format!("ex{id}"), MetricKind::ALL[m], k as usize, score)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn csv_and_json_round_trip(records in proptest::collection::vec(record_strategy(), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let rep = Report::new("run", "set", records, HeadAggregation::Mean).unwrap();
            let csv_path = dir.path().join("r.csv");
            write_report(&rep, &csv_path, ReportFormat::Csv).unwrap();
            prop_assert_eq!(&read_report(&csv_path, ReportFormat::Csv).unwrap(), &rep);
            let json_path = dir.path().join("r.json");
            write_report(&rep, &json_path, ReportFormat::Json).unwrap();
            prop_assert_eq!(&read_report(&json_path, ReportFormat::Json).unwrap(), &rep);
        }
    }
}
