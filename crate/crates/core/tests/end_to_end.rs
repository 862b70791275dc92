//! Corpus text to alignment report through the public API.

use std::collections::BTreeMap;

use ndarray::Array4;

use vulnalign_core::align::ast_input_tokens;
use vulnalign_core::features::extract_pvs;
use vulnalign_core::report::{read_report, write_report};
use vulnalign_core::summary::SummaryView;
use vulnalign_core::{
    align_example, parse, AlignConfig, AttentionTensor, HeadAggregation, MetricKind, ModelDump, PvsRuleSet, Report,
    ReportFormat,
};

const CODE: &str = "void f ( char * d , char * s ) { strcpy ( d , s ) ; return ; }";

#[test]
fn pvs_to_report() {
    let ast = parse(CODE).unwrap();
    let pvs = extract_pvs(&ast, &PvsRuleSet::v2());
    let texts: Vec<&str> = pvs.tokens.iter().map(|t| ast.terminals()[*t].text.as_str()).collect();
    assert_eq!(texts, ["strcpy", "(", "d", ",", "s", ")", ";"]);

    let tokens = ast_input_tokens(&ast);
    let n = tokens.len();
    // Saliency peaks exactly on the PVS; everything attends to token 0.
    let saliency: Vec<f64> = (0..n).map(|i| if pvs.tokens.contains(&i) { 1.0 } else { 0.0 }).collect();
    let mut att = Array4::zeros((2, 1, n, n));
    att.slice_mut(ndarray::s![.., .., .., 0]).fill(1.0f32);
    let dump = ModelDump::new(
        "f",
        tokens,
        Some(AttentionTensor::new(att).unwrap()),
        BTreeMap::from([("Saliency".to_owned(), saliency)]),
    )
    .unwrap();

    let out = align_example(&ast, &[pvs], &dump, &AlignConfig::default()).unwrap();
    let score = |m: MetricKind| out.records.iter().filter(|r| r.metric == m).map(|r| r.score).collect::<Vec<_>>();
    assert_eq!(score(MetricKind::Interpret), [1.0]);
    assert_eq!(score(MetricKind::Attention).len(), 2);

    let report = Report::new("run", "toy", out.records, HeadAggregation::Mean).unwrap();
    assert!(report.summary.iter().any(|r| r.view == SummaryView::Head));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_report(&report, &path, ReportFormat::Csv).unwrap();
    assert_eq!(read_report(&path, ReportFormat::Csv).unwrap(), report);
}
