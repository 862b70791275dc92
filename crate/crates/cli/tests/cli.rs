use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array2, Array4};
use vulnalign_core::dump::write_dump;
use vulnalign_core::report::read_report;
use vulnalign_core::{AttentionTensor, InputToken, MetricKind, ModelDump, ReportFormat};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn vulnalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulnalign"))
        .args(args)
        .env_remove("VULNALIGN_JOBS")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vulnalign(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus() -> PathBuf {
    fixtures().join("corpus.jsonl")
}

#[test]
fn extract_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, golden) in [("pvs", "features.pvs-v2.jsonl"), ("buggy-path", "features.buggy-path.jsonl")] {
        let out = dir.path().join(golden);
        ok(&["extract", "--corpus", s(&corpus()), "--kind", kind, "-o", s(&out)]);
        let got = fs::read_to_string(&out).unwrap();
        assert_eq!(got, fs::read_to_string(fixtures().join("golden").join(golden)).unwrap(), "{kind}");
    }
    let pvs = fs::read_to_string(dir.path().join("features.pvs-v2.jsonl")).unwrap();
    assert_eq!(pvs.lines().count(), 12);
}

#[test]
fn annotate_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["baseline", "mark", "prepend"] {
        let name = format!("annotated.{mode}.jsonl");
        let out = dir.path().join(&name);
        ok(&["annotate", "--corpus", s(&corpus()), "--mode", mode, "-o", s(&out)]);
        assert_eq!(
            fs::read_to_string(&out).unwrap(),
            fs::read_to_string(fixtures().join("golden").join(&name)).unwrap(),
            "{mode}"
        );
    }
}

fn token_lines(path: &Path) -> Vec<(String, Vec<String>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let tokens = v["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap().to_owned());
            (v["id"].as_str().unwrap().to_owned(), tokens.collect())
        })
        .collect()
}

#[test]
fn baseline_is_normalized_passthrough_and_mark_without_pvs_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.jsonl");
    fs::write(
        &corpus_path,
        concat!(
            r#"{"id": "a", "code": "int f(void)\n{\n  return 0;\n}", "label": 0}"#,
            "\n",
            r#"{"id": "b", "code": "x;", "label": 1}"#,
            "\n",
            r#"{"id": "c", "code": "if (a) { b = c; }", "label": 0}"#,
            "\n"
        ),
    )
    .unwrap();
    let base = dir.path().join("base.jsonl");
    let mark = dir.path().join("mark.jsonl");
    ok(&["annotate", "--corpus", s(&corpus_path), "--mode", "baseline", "-o", s(&base)]);
    ok(&["annotate", "--corpus", s(&corpus_path), "--mode", "mark", "-o", s(&mark)]);
    let b = token_lines(&base);
    let normalized = ["int f ( void ) { return 0 ; }", "x ;", "if ( a ) { b = c ; }"];
    assert_eq!(b.len(), 3);
    for ((_, tokens), n) in b.iter().zip(normalized) {
        assert_eq!(tokens.join(" "), n);
    }
    assert_eq!(token_lines(&mark), b);
}

#[test]
fn figure_program_with_subword_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let fig = fixtures().join("figure");
    let out = dir.path().join("p.jsonl");
    ok(&[
        "annotate",
        "--corpus",
        s(&fig.join("corpus.jsonl")),
        "--dumps",
        s(&fig),
        "--mode",
        "prepend",
        "-o",
        s(&out),
    ]);
    let (_, tokens) = &token_lines(&out)[0];
    assert_eq!(
        tokens.join(" "),
        "[BOS] mall oc ( 10 ); [SEP] int main () { mall oc ( 10 ); } [EOS]"
    );
}

#[test]
fn unparseable_example_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.jsonl");
    fs::write(
        &c,
        concat!(
            r#"{"id": "ok", "code": "free(p);", "label": 1}"#,
            "\n",
            r#"{"id": "bad", "code": "/* only a comment */", "label": 0}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("f.jsonl");
    let o = ok(&["extract", "--corpus", s(&c), "-o", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad"));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn empty_corpus_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.jsonl");
    fs::write(&c, "").unwrap();
    let o = vulnalign(&["extract", "--corpus", s(&c), "-o", s(&dir.path().join("f"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vulnalign(&["extract", "--bogus"]).status.code(), Some(1));
    assert_eq!(vulnalign(&[]).status.code(), Some(1));
    let o = vulnalign(&[
        "align",
        "--corpus",
        s(&corpus()),
        "--dumps",
        s(&fixtures()),
        "-o",
        "/dev/null",
        "--metrics",
        "pair_proportion",
        "--theta",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(vulnalign(&["--help"]).status.code(), Some(0));
}

/// Three examples: `a` has a PVS and a hand-built dump, `b` has an empty
/// PVS, `c` has no dump.
fn align_fixture(dir: &Path, layers: usize) -> PathBuf {
    let c = dir.join("corpus.jsonl");
    fs::write(
        &c,
        concat!(
            r#"{"id": "a", "code": "x = a / b;", "label": 1}"#,
            "\n",
            r#"{"id": "b", "code": "y;", "label": 0}"#,
            "\n",
            r#"{"id": "c", "code": "z = p[0];", "label": 1}"#,
            "\n"
        ),
    )
    .unwrap();
    // x = a / b ;  -> PVS {a, /, b, ;} = {2, 3, 4, 5}
    let texts = ["x", "=", "a", "/", "b", ";"];
    let tokens: Vec<_> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| InputToken::new(i, *t, Some(2 * i..2 * i + t.len())))
        .collect();
    let eye = Array2::<f32>::eye(6);
    let mut shifted = Array2::<f32>::from_elem((6, 6), 1.0 / 6.0);
    for (r, c) in [(2, 3), (3, 4), (4, 5), (5, 2)] {
        shifted.row_mut(r).fill(0.0);
        shifted[[r, c]] = 1.0;
    }
    let layer_mats = [eye, shifted];
    let att = Array4::from_shape_fn((layers, 1, 6, 6), |(l, _, r, c)| layer_mats[l][[r, c]]);
    let attributions = BTreeMap::from([
        ("saliency".to_string(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.5]),
        ("shap".to_string(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]),
    ]);
    let dump = ModelDump::new("a", tokens, Some(AttentionTensor::new(att).unwrap()), attributions).unwrap();
    let dumps = dir.join("dumps");
    write_dump(&dumps, &dump, false).unwrap();
    let b_tokens = vec![InputToken::new(0, "y", Some(0..1)), InputToken::new(1, ";", Some(2..3))];
    let b = ModelDump::new("b", b_tokens, None, BTreeMap::new()).unwrap();
    write_dump(&dumps, &b, false).unwrap();
    c
}

#[test]
fn align_scores_match_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let c = align_fixture(dir.path(), 2);
    let out = dir.path().join("r.csv");
    let o = ok(&[
        "align",
        "--corpus",
        s(&c),
        "--dumps",
        s(&dir.path().join("dumps")),
        "-o",
        s(&out),
    ]);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("1 missing dumps"), "{log}");
    assert!(log.contains("1 empty bug sets"), "{log}");
    let rep = read_report(&out, ReportFormat::Csv).unwrap();
    let scores: Vec<_> = rep
        .records
        .iter()
        .map(|r| (r.metric, r.tool.clone(), r.layer, r.score))
        .collect();
    let third = 1.0 / 3.0;
    assert_eq!(
        scores,
        [
            (MetricKind::Interpret, Some("saliency".into()), None, 1.0),
            (MetricKind::Interpret, Some("shap".into()), None, third),
            (MetricKind::Attention, None, Some(0), third),
            (MetricKind::Attention, None, Some(1), 1.0),
            (MetricKind::Interaction, None, None, 1.0),
        ]
    );
    let per_example: BTreeMap<_, _> = rep.examples.iter().map(|e| (e.metric, e.score)).collect();
    assert!((per_example[&MetricKind::Interpret] - 2.0 / 3.0).abs() < 1e-12);
    assert!((per_example[&MetricKind::Attention] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(
        fs::read_to_string(dir.path().join("r.summary.csv")).unwrap().lines().count(),
        1 + 3 + 2
    );

    let max = dir.path().join("max.json");
    ok(&[
        "align",
        "--corpus",
        s(&c),
        "--dumps",
        s(&dir.path().join("dumps")),
        "-o",
        s(&max),
        "--aggregation",
        "max",
        "--metrics",
        "attention",
    ]);
    let rep = read_report(&max, ReportFormat::Json).unwrap();
    assert_eq!(rep.examples[0].score, 1.0);
}

#[test]
fn single_layer_dump_cannot_build_interaction() {
    let dir = tempfile::tempdir().unwrap();
    let c = align_fixture(dir.path(), 1);
    let o = vulnalign(&[
        "align",
        "--corpus",
        s(&c),
        "--dumps",
        s(&dir.path().join("dumps")),
        "-o",
        s(&dir.path().join("r.csv")),
        "--metrics",
        "interaction",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2 layers"));
}

#[test]
fn no_nonempty_bug_set_is_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    align_fixture(dir.path(), 2);
    let c = dir.path().join("only_b.jsonl");
    fs::write(&c, r#"{"id": "b", "code": "y;", "label": 0}"#).unwrap();
    let o = vulnalign(&[
        "align",
        "--corpus",
        s(&c),
        "--dumps",
        s(&dir.path().join("dumps")),
        "-o",
        s(&dir.path().join("r.csv")),
        "--metrics",
        "interpret",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to report"));
}

#[test]
fn stats_on_hand_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("hand.jsonl");
    // vulnerable: |PVS| 5 and 3, mean 4; non-vulnerable: 3 and 0, mean 1.5
    fs::write(
        &c,
        concat!(
            r#"{"id": "v1", "code": "free(p);", "label": 1, "bug_lines": [[1], [1], [1]]}"#,
            "\n",
            r#"{"id": "v2", "code": "i++;", "label": 1, "bug_lines": [[1]]}"#,
            "\n",
            r#"{"id": "n1", "code": "*p;", "label": 0}"#,
            "\n",
            r#"{"id": "n2", "code": "x;", "label": 0}"#,
            "\n"
        ),
    )
    .unwrap();
    let json = dir.path().join("stats.json");
    let o = ok(&["stats", "--corpus", s(&c), "-o", s(&json)]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("vulnerable_mean_pvs\t4.0000"), "{text}");
    assert!(text.contains("non_vulnerable_mean_pvs\t1.5000"), "{text}");
    assert!(text.contains("pvs_ratio\t2.6667"), "{text}");
    assert!(text.contains("mean_traces\t2.0000"), "{text}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["traces"]["total_traces"], 4);
}

#[test]
fn report_merges_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = align_fixture(dir.path(), 2);
    let dumps = dir.path().join("dumps");
    let r1 = dir.path().join("r1.csv");
    let r2 = dir.path().join("r2.json");
    ok(&["align", "--corpus", s(&c), "--dumps", s(&dumps), "-o", s(&r1), "--metrics", "interpret"]);
    ok(&["align", "--corpus", s(&c), "--dumps", s(&dumps), "-o", s(&r2), "--metrics", "attention"]);
    let merged = dir.path().join("m.json");
    ok(&["report", "-i", s(&r1), "-i", s(&r2), "-o", s(&merged)]);
    let rep = read_report(&merged, ReportFormat::Json).unwrap();
    assert_eq!(rep.records.len(), 4);
    let printed = ok(&["report", "-i", s(&merged)]);
    let table = String::from_utf8_lossy(&printed.stdout);
    assert!(table.starts_with("metric\tview"));
    assert!(table.contains("attention\thead\t1\t0"));
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for jobs in ["1", "4"] {
        let out = dir.path().join(format!("m{jobs}.jsonl"));
        ok(&["-j", jobs, "annotate", "--corpus", s(&corpus()), "--mode", "mark", "-o", s(&out)]);
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
