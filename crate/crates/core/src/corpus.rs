//! Normalized corpus files and extracted-feature files (JSON lines).
//!
//! A corpus line looks like
//! `{"id": "d2a-17", "code": "int f() {...}", "label": 1, "bug_lines": [[3, 5], [3]]}`;
//! `bug_lines` (static-analyzer trace lines) and `dataset` are optional.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ast::{Ast, Label, SourceFunction};
use crate::error::{Error, Result};
use crate::features::{BugFeatureSet, FeatureKind, PvsVersion};

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

fn parse_record(value: Value, line: usize, default_dataset: &str) -> Result<SourceFunction> {
    let Value::Object(obj) = value else {
        return Err(schema(line, "expected a JSON object"));
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(schema(line, "missing or empty \"id\"")),
    };
    let code = match obj.get("code") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return Err(schema(line, format!("{id}: missing or empty \"code\""))),
    };
    let label = match obj.get("label") {
        Some(Value::Number(n)) => n.as_i64().and_then(Label::from_int),
        Some(Value::Bool(b)) => Some(if *b { Label::Vulnerable } else { Label::NonVulnerable }),
        None => return Err(schema(line, format!("{id}: missing \"label\""))),
        _ => None,
    }
    .ok_or_else(|| Error::Label {
        line,
        value: obj["label"].to_string(),
    })?;
    let dataset = match obj.get("dataset") {
        Some(Value::String(s)) => s.clone(),
        _ => default_dataset.to_owned(),
    };
    let bug_line_traces = match obj.get("bug_lines") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => {
            let traces: Vec<Vec<u32>> = serde_json::from_value(v.clone())
                .map_err(|e| schema(line, format!("{id}: bad \"bug_lines\": {e}")))?;
            if traces.iter().any(|t| t.is_empty()) {
                return Err(schema(line, format!("{id}: empty trace in \"bug_lines\"")));
            }
            if traces.iter().flatten().any(|l| *l == 0) {
                return Err(schema(line, format!("{id}: trace line numbers are 1-based")));
            }
            traces
        }
    };
    Ok(SourceFunction {
        id,
        code,
        label,
        dataset,
        bug_line_traces,
    })
}

/// Reads a JSON-lines corpus, preserving order. Blank lines are ignored.
pub fn read_corpus(reader: impl BufRead, default_dataset: &str) -> Result<Vec<SourceFunction>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| schema(line_no, e.to_string()))?;
        let f = parse_record(value, line_no, default_dataset)?;
        if !seen.insert(f.id.clone()) {
            return Err(schema(line_no, format!("duplicate id {:?}", f.id)));
        }
        out.push(f);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<SourceFunction>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let dataset = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_corpus(BufReader::new(fs::File::open(path)?), &dataset)
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    id: &'a str,
    code: &'a str,
    label: u8,
    dataset: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    bug_lines: &'a Vec<Vec<u32>>,
}

pub fn write_corpus(path: &Path, corpus: &[SourceFunction]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for f in corpus {
        let line = CorpusLine {
            id: &f.id,
            code: &f.code,
            label: f.label.as_int(),
            dataset: &f.dataset,
            bug_lines: &f.bug_line_traces,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One extracted feature set, as written by `extract`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub kind: FeatureKind,
    pub version: Option<PvsVersion>,
    pub path_id: Option<u32>,
    pub tokens: Vec<usize>,
    pub texts: Vec<String>,
}

impl FeatureRecord {
    pub fn new(id: &str, ast: &Ast, set: &BugFeatureSet, version: Option<PvsVersion>) -> Self {
        FeatureRecord {
            id: id.to_owned(),
            kind: set.kind,
            version: match set.kind {
                FeatureKind::Pvs => version,
                FeatureKind::BuggyPath => None,
            },
            path_id: set.path_id,
            tokens: set.tokens.clone(),
            texts: set
                .tokens
                .iter()
                .map(|t| ast.terminals()[*t].text.clone())
                .collect(),
        }
    }

    pub fn to_feature_set(&self) -> BugFeatureSet {
        BugFeatureSet {
            kind: self.kind,
            tokens: self.tokens.clone(),
            path_id: self.path_id,
        }
    }
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::parse;
    use crate::features::{extract_pvs, PvsRuleSet};

    fn read(text: &str) -> Result<Vec<SourceFunction>> {
        read_corpus(text.as_bytes(), "test")
    }

    #[test]
    fn reads_valid_lines() {
        let c = read(concat!(
            r#"{"id": "a", "code": "int f() { return 0; }", "label": 0}"#,
            "\n\n",
            r#"{"id": "b", "code": "x;", "label": 1, "dataset": "d2a"}"#,
            "\n"
        ))
        .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].id, "a");
        assert_eq!(c[0].label, Label::NonVulnerable);
        assert_eq!(c[0].dataset, "test");
        assert_eq!(c[1].dataset, "d2a");
    }

    #[test]
    fn reads_traces() {
        let c = read(r#"{"id": "d", "code": "a;\nb;\nc;", "label": 1, "bug_lines": [[1, 2], [3], [2, 3]]}"#).unwrap();
        assert_eq!(c[0].bug_line_traces, vec![vec![1, 2], vec![3], vec![2, 3]]);
    }

    #[test]
    fn duplicate_id_is_schema_error() {
        let err = read(concat!(
            r#"{"id": "a", "code": "x;", "label": 0}"#,
            "\n",
            r#"{"id": "a", "code": "y;", "label": 1}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_label_is_label_error() {
        let err = read(r#"{"id": "a", "code": "x;", "label": 2}"#).unwrap_err();
        assert!(matches!(err, Error::Label { line: 1, .. }));
        let err = read(r#"{"id": "a", "code": "x;", "label": "yes"}"#).unwrap_err();
        assert!(matches!(err, Error::Label { .. }));
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        for bad in [
            "not json",
            r#"{"code": "x;", "label": 0}"#,
            r#"{"id": "a", "code": "", "label": 0}"#,
            r#"{"id": "a", "code": "x;"}"#,
            r#"{"id": "a", "code": "x;", "label": 0, "bug_lines": [[]]}"#,
            r#"{"id": "a", "code": "x;", "label": 0, "bug_lines": [[0]]}"#,
            r#"{"id": "a", "code": "x;", "label": 0, "bug_lines": "3"}"#,
        ] {
            let text = format!("{}\n{bad}", r#"{"id": "ok", "code": "x;", "label": 0}"#);
            match read(&text) {
                Err(Error::Schema { line: 2, .. }) => {}
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = read(concat!(
            r#"{"id": "a", "code": "int f() {\n\treturn 0;\n}", "label": 0, "dataset": "x"}"#,
            "\n",
            r#"{"id": "b", "code": "x;", "label": 1, "dataset": "x", "bug_lines": [[1]]}"#
        ))
        .unwrap();
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn feature_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let ast = parse("free(p);").unwrap();
        let set = extract_pvs(&ast, &PvsRuleSet::v2());
        let rec = FeatureRecord::new("a", &ast, &set, Some(PvsVersion::V2));
        assert_eq!(rec.texts, ["free", "(", "p", ")", ";"]);
        write_features(&path, std::slice::from_ref(&rec)).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        assert_eq!(back[0].to_feature_set(), set);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"id":"a","kind":"pvs","version":"v2","path_id":null,"tokens":[0,1,2,3,4]"#));
    }
}
