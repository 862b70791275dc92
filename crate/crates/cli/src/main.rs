use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use vulnalign_core::annotate::{annotate_function, write_annotated, AnnotatedRecord};
use vulnalign_core::corpus::{load_features, write_features};
use vulnalign_core::dump::load_dump;
use vulnalign_core::features::{extract_buggy_paths, extract_pvs, pvs_statistics_from_counts, trace_statistics};
use vulnalign_core::report::{read_report, write_report};
use vulnalign_core::{
    align_example, load_corpus, parse, AlignConfig, AlignmentRecord, AnnotationConfig, AnnotationMode,
    AttentionPooling, BugFeatureSet, Error, FeatureKind, FeatureRecord, HeadAggregation, KPolicy, Label,
    MetricKind, PvsRuleSet, PvsVersion, Report, ReportFormat, SourceFunction,
};

/// Bug-semantic features for C functions and their alignment with model attention.
#[derive(Parser, Debug)]
#[command(name = "vulnalign", version)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, short = 'j', global = true, env = "VULNALIGN_JOBS", default_value_t = 0)]
    jobs: usize,

    /// More logging (-v info, -vv debug). RUST_LOG overrides.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract PVS or buggy-path feature sets from a corpus.
    Extract(ExtractArgs),
    /// Score alignment between feature sets and model dumps.
    Align(AlignArgs),
    /// Write a Mark/Prepend-annotated training corpus.
    Annotate(AnnotateArgs),
    /// PVS and trace statistics for a corpus.
    Stats(StatsArgs),
    /// Merge and re-summarize existing reports.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct RuleArgs {
    /// PVS rule set.
    #[arg(long, default_value = "v2")]
    pvs_version: PvsVersion,

    /// JSON rule-set file, overriding --pvs-version.
    #[arg(long)]
    rules: Option<PathBuf>,
}

impl RuleArgs {
    fn rules(&self) -> anyhow::Result<PvsRuleSet> {
        match &self.rules {
            Some(p) => PvsRuleSet::load(p).with_context(|| format!("loading rules {}", p.display())),
            None => Ok(PvsRuleSet::for_version(self.pvs_version)),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum KindArg {
    Pvs,
    BuggyPath,
}

impl From<KindArg> for FeatureKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Pvs => FeatureKind::Pvs,
            KindArg::BuggyPath => FeatureKind::BuggyPath,
        }
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Corpus, JSON lines.
    #[arg(long)]
    corpus: PathBuf,

    /// Output feature file, JSON lines.
    #[arg(long, short)]
    out: PathBuf,

    #[arg(long, value_enum, default_value = "pvs")]
    kind: KindArg,

    #[command(flatten)]
    rules: RuleArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PoolingArg {
    BlockMean,
    RowMean,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AggregationArg {
    Mean,
    Max,
}

impl From<AggregationArg> for HeadAggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => HeadAggregation::Mean,
            AggregationArg::Max => HeadAggregation::Max,
        }
    }
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    corpus: PathBuf,

    /// Feature file from `extract`; extracted on the fly when omitted.
    #[arg(long)]
    features: Option<PathBuf>,

    /// Directory of model dumps.
    #[arg(long)]
    dumps: PathBuf,

    /// Report path; siblings `.examples` and `.summary` are written for CSV.
    #[arg(long, short)]
    out: PathBuf,

    /// Report format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    /// Metrics, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "interpret,attention,interaction")]
    metrics: Vec<MetricKind>,

    /// Size of M: "b" for |B| or a fixed integer.
    #[arg(long, default_value = "b")]
    k: KPolicy,

    /// Attention threshold for pair_proportion.
    #[arg(long, default_value_t = 0.3)]
    theta: f64,

    /// Top-t cells for chain/coverage/components (default max(m, 2n)).
    #[arg(long)]
    top_t: Option<usize>,

    /// Folding of heads into one per-example score.
    #[arg(long, value_enum, default_value = "mean")]
    aggregation: AggregationArg,

    /// Subword-to-AST attention pooling.
    #[arg(long, value_enum, default_value = "block-mean")]
    pooling: PoolingArg,

    /// Feature kind when extracting on the fly.
    #[arg(long, value_enum, default_value = "pvs")]
    kind: KindArg,

    #[command(flatten)]
    rules: RuleArgs,

    /// Run name recorded in the summary.
    #[arg(long, default_value = "run")]
    run: String,

    /// Dataset name recorded in the summary (default: corpus file stem).
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Baseline,
    Mark,
    Prepend,
}

impl From<ModeArg> for AnnotationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => AnnotationMode::Baseline,
            ModeArg::Mark => AnnotationMode::Mark,
            ModeArg::Prepend => AnnotationMode::Prepend,
        }
    }
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: PathBuf,

    #[arg(long, short)]
    out: PathBuf,

    #[arg(long, value_enum)]
    mode: ModeArg,

    /// Dump directory whose token files supply the tokenization; without it
    /// AST tokens are used.
    #[arg(long)]
    dumps: Option<PathBuf>,

    #[command(flatten)]
    rules: RuleArgs,

    #[arg(long, default_value = "<vul-b>")]
    begin_marker: String,

    #[arg(long, default_value = "<vul-e>")]
    end_marker: String,

    #[arg(long, default_value = "[SEP]")]
    separator: String,

    #[arg(long, default_value_t = 512)]
    context_limit: usize,

    #[arg(long, default_value_t = 100)]
    max_prepend: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,

    #[command(flatten)]
    rules: RuleArgs,

    /// Also write the statistics as JSON.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Reports to merge (CSV record files or JSON reports).
    #[arg(long = "input", short, required = true)]
    inputs: Vec<PathBuf>,

    /// Merged report; the summary is printed when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,

    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    #[arg(long, value_enum, default_value = "mean")]
    aggregation: AggregationArg,

    /// Run name (default: taken from the first input).
    #[arg(long)]
    run: Option<String>,

    /// Dataset name (default: taken from the first input).
    #[arg(long)]
    dataset: Option<String>,
}

/// A configuration problem the user can fix on the command line.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::InvalidThreshold(_) | Error::InvalidTopT) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", cli.jobs);
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Extract(a) => cmd_extract(&a),
        Command::Align(a) => cmd_align(&a),
        Command::Annotate(a) => cmd_annotate(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn read_corpus(path: &Path) -> anyhow::Result<Vec<SourceFunction>> {
    let corpus = load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

/// Feature sets for one function.
fn features_of(f: &SourceFunction, kind: FeatureKind, rules: &PvsRuleSet) -> vulnalign_core::Result<Vec<FeatureRecord>> {
    let ast = parse(&f.code)?;
    let records = match kind {
        FeatureKind::Pvs => {
            let set = extract_pvs(&ast, rules);
            vec![FeatureRecord::new(&f.id, &ast, &set, Some(rules.version))]
        }
        FeatureKind::BuggyPath => extract_buggy_paths(&ast, f)
            .iter()
            .map(|set| FeatureRecord::new(&f.id, &ast, set, None))
            .collect(),
    };
    Ok(records)
}

fn check_traces(corpus: &[SourceFunction], kind: FeatureKind) -> anyhow::Result<()> {
    if kind == FeatureKind::BuggyPath && corpus.iter().all(|f| f.bug_line_traces.is_empty()) {
        return Err(usage("buggy-path features need a corpus with bug_lines traces"));
    }
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> anyhow::Result<()> {
    let rules = a.rules.rules()?;
    let corpus = read_corpus(&a.corpus)?;
    let kind = a.kind.into();
    check_traces(&corpus, kind)?;
    let results: Vec<_> = corpus.par_iter().map(|f| features_of(f, kind, &rules)).collect();
    let mut records = Vec::new();
    let mut skipped = 0;
    for (f, r) in corpus.iter().zip(results) {
        match r {
            Ok(rs) => records.extend(rs),
            Err(e) => {
                log::warn!("{}: skipped: {e}", f.id);
                skipped += 1;
            }
        }
    }
    if skipped == corpus.len() {
        bail!("no example could be parsed");
    }
    write_features(&a.out, &records)?;
    eprintln!("extract: {} feature sets from {} functions, {skipped} skipped", records.len(), corpus.len());
    Ok(())
}

enum Outcome {
    Records(vulnalign_core::pipeline::ExampleOutcome),
    MissingDump,
    NoFeatures,
    Failed(Error),
}

fn cmd_align(a: &AlignArgs) -> anyhow::Result<()> {
    let cfg = AlignConfig {
        metrics: a.metrics.iter().copied().collect(),
        k: a.k,
        theta: a.theta,
        top_t: a.top_t,
        pooling: match a.pooling {
            PoolingArg::BlockMean => AttentionPooling::BlockMean,
            PoolingArg::RowMean => AttentionPooling::RowMean,
        },
    };
    cfg.validate()?;
    if !a.dumps.is_dir() {
        return Err(Error::MissingFile(a.dumps.clone()).into());
    }
    let rules = a.rules.rules()?;
    let corpus = read_corpus(&a.corpus)?;

    let mut by_id: BTreeMap<String, Vec<BugFeatureSet>> = BTreeMap::new();
    if let Some(path) = &a.features {
        for r in load_features(path).with_context(|| format!("reading features {}", path.display()))? {
            by_id.entry(r.id.clone()).or_default().push(r.to_feature_set());
        }
    } else {
        let kind = a.kind.into();
        check_traces(&corpus, kind)?;
        for f in &corpus {
            if let Ok(rs) = features_of(f, kind, &rules) {
                by_id.insert(f.id.clone(), rs.iter().map(FeatureRecord::to_feature_set).collect());
            }
        }
    }

    let outcomes: Vec<Outcome> = corpus
        .par_iter()
        .map(|f| {
            let Some(sets) = by_id.get(&f.id) else {
                return Outcome::NoFeatures;
            };
            let dump = match load_dump(&a.dumps, &f.id) {
                Ok(d) => d,
                Err(Error::MissingFile(_)) => return Outcome::MissingDump,
                Err(e) => return Outcome::Failed(e),
            };
            match parse(&f.code).and_then(|ast| align_example(&ast, sets, &dump, &cfg)) {
                Ok(o) => Outcome::Records(o),
                Err(e) => Outcome::Failed(e),
            }
        })
        .collect();

    let mut records: Vec<AlignmentRecord> = Vec::new();
    let (mut missing, mut failed, mut empty, mut short, mut unfeatured) = (0, 0, 0, 0, 0);
    let mut first_error = None;
    for (f, o) in corpus.iter().zip(outcomes) {
        match o {
            Outcome::Records(o) => {
                records.extend(o.records);
                empty += o.empty_sets;
                short += o.short_paths;
            }
            Outcome::MissingDump => {
                log::debug!("{}: no dump", f.id);
                missing += 1;
            }
            Outcome::NoFeatures => unfeatured += 1,
            Outcome::Failed(e) => {
                log::warn!("{}: skipped: {e}", f.id);
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    eprintln!(
        "align: {} records; {missing} missing dumps, {failed} failed, {unfeatured} without features, \
         {empty} empty bug sets, {short} short paths",
        records.len()
    );
    if records.is_empty() {
        if let Some(e) = first_error {
            return Err(anyhow::Error::from(e).context("no example could be aligned"));
        }
        return Err(Error::EmptyReport("no example has a nonempty bug set and a dump").into());
    }
    let dataset = a.dataset.clone().unwrap_or_else(|| stem(&a.corpus));
    let report = Report::new(&a.run, &dataset, records, a.aggregation.into())?;
    let format = a.format.map_or_else(|| ReportFormat::from_path(&a.out), Into::into);
    write_report(&report, &a.out, format)?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_annotate(a: &AnnotateArgs) -> anyhow::Result<()> {
    let cfg = AnnotationConfig {
        begin_marker: a.begin_marker.clone(),
        end_marker: a.end_marker.clone(),
        separator: a.separator.clone(),
        context_limit: a.context_limit,
        max_prepend: a.max_prepend,
    };
    cfg.validate()?;
    let rules = a.rules.rules()?;
    let corpus = read_corpus(&a.corpus)?;
    let mode = a.mode.into();
    let results: Vec<vulnalign_core::Result<AnnotatedRecord>> = corpus
        .par_iter()
        .map(|f| {
            let tokens = match &a.dumps {
                Some(dir) => Some(vulnalign_core::dump::read_input_tokens(&vulnalign_core::dump::tokens_path(
                    dir, &f.id,
                ))?),
                None => None,
            };
            annotate_function(f, tokens.as_deref(), mode, &rules, &cfg)
        })
        .collect();
    let mut records = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for (f, r) in corpus.iter().zip(results) {
        match r {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}: skipped: {e}", f.id);
                skipped += 1;
            }
        }
    }
    if records.is_empty() {
        bail!("no example could be annotated");
    }
    write_annotated(&a.out, &records)?;
    eprintln!("annotate: {} examples ({mode}), {skipped} skipped", records.len());
    Ok(())
}

#[derive(Serialize)]
struct StatsOutput {
    dataset: String,
    pvs: vulnalign_core::features::PvsStatistics,
    traces: vulnalign_core::features::TraceStatistics,
}

fn cmd_stats(a: &StatsArgs) -> anyhow::Result<()> {
    let rules = a.rules.rules()?;
    let corpus = read_corpus(&a.corpus)?;
    let counts: Vec<Option<(Label, usize)>> = corpus
        .par_iter()
        .map(|f| match parse(&f.code) {
            Ok(ast) => Some((f.label, extract_pvs(&ast, &rules).len())),
            Err(e) => {
                log::warn!("{}: skipped: {e}", f.id);
                None
            }
        })
        .collect();
    let skipped = counts.iter().filter(|c| c.is_none()).count();
    let counts: Vec<_> = counts.into_iter().flatten().collect();
    let pvs = pvs_statistics_from_counts(rules.version, &counts, skipped)?;
    let traces = trace_statistics(&corpus);
    let out = StatsOutput {
        dataset: stem(&a.corpus),
        pvs,
        traces,
    };
    let mut w = io::stdout().lock();
    writeln!(w, "dataset\t{}", out.dataset)?;
    writeln!(w, "pvs_version\t{}", out.pvs.version)?;
    writeln!(w, "vulnerable_programs\t{}", out.pvs.vulnerable.programs)?;
    writeln!(w, "vulnerable_mean_pvs\t{:.4}", out.pvs.vulnerable.mean_pvs)?;
    writeln!(w, "non_vulnerable_programs\t{}", out.pvs.non_vulnerable.programs)?;
    writeln!(w, "non_vulnerable_mean_pvs\t{:.4}", out.pvs.non_vulnerable.mean_pvs)?;
    writeln!(w, "pvs_ratio\t{:.4}", out.pvs.ratio)?;
    writeln!(w, "skipped\t{}", out.pvs.skipped)?;
    writeln!(w, "programs_with_traces\t{}", out.traces.programs_with_traces)?;
    writeln!(w, "total_traces\t{}", out.traces.total_traces)?;
    writeln!(w, "mean_traces\t{:.4}", out.traces.mean_traces)?;
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> anyhow::Result<()> {
    let mut records = Vec::new();
    let (mut run, mut dataset) = (a.run.clone(), a.dataset.clone());
    for path in &a.inputs {
        let rep = read_report(path, ReportFormat::from_path(path))
            .with_context(|| format!("reading report {}", path.display()))?;
        run.get_or_insert(rep.run);
        dataset.get_or_insert(rep.dataset);
        records.extend(rep.records);
    }
    let report = Report::new(
        run.as_deref().unwrap_or("run"),
        dataset.as_deref().unwrap_or(""),
        records,
        a.aggregation.into(),
    )?;
    match &a.out {
        Some(out) => {
            let format = a.format.map_or_else(|| ReportFormat::from_path(out), Into::into);
            write_report(&report, out, format)?;
        }
        None => {
            let mut w = io::stdout().lock();
            writeln!(w, "metric\tview\tlayer\thead\tpath_len\tcount\tmean\tmedian\tq1\tq3")?;
            let opt = |v: Option<u32>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            for r in &report.summary {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    r.metric,
                    r.view,
                    opt(r.layer),
                    opt(r.head),
                    opt(r.path_len),
                    r.count,
                    r.mean,
                    r.median,
                    r.q1,
                    r.q3
                )?;
            }
        }
    }
    Ok(())
}
