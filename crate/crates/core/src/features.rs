//! Ground-truth bug-semantic token sets: potentially vulnerable statements
//! (PVS) and buggy paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ast::{parse, Ast, Label, NodeId, SourceFunction};
use crate::error::{Error, Result};
use crate::TokenSet;

const V1_CALLS: &[&str] = &[
    "malloc",
    "calloc",
    "realloc",
    "aligned_alloc",
    "free",
    "gets",
    "scanf",
    "strcpy",
    "strcat",
];

const V2_CALLS: &[&str] = &[
    "malloc",
    "calloc",
    "realloc",
    "aligned_alloc",
    "kalloc",
    "kcalloc",
    "krealloc",
    "valloc",
    "vcalloc",
    "vrealloc",
    "free",
    "kfree",
    "free_sized",
    "free_aligned_sized",
    "gets",
    "puts",
    "scanf",
    "sprintf",
    "strcpy",
    "strncpy",
    "strlen",
    "strcat",
    "strncat",
];

const V1_OPERATORS: &[&str] = &["+", "-", "/", "*", "%"];

const V2_OPERATORS: &[&str] = &[
    "+", "+=", "++", "-", "-=", "--", "*", "*=", "/", "/=", "%", "%=",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvsVersion {
    V1,
    V2,
    /// V2 triggers, keeping only callee names and operator tokens.
    V3,
}

impl fmt::Display for PvsVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PvsVersion::V1 => "v1",
            PvsVersion::V2 => "v2",
            PvsVersion::V3 => "v3",
        })
    }
}

impl std::str::FromStr for PvsVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(PvsVersion::V1),
            "v2" => Ok(PvsVersion::V2),
            "v3" => Ok(PvsVersion::V3),
            other => Err(Error::InvalidConfig(format!("unknown PVS version {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralTriggers {
    /// `buf[i]`
    pub subscript: bool,
    /// unary `*ptr`
    pub pointer_deref: bool,
    /// `ptr->field`
    pub field_arrow: bool,
}

impl Default for StructuralTriggers {
    fn default() -> Self {
        StructuralTriggers {
            subscript: true,
            pointer_deref: true,
            field_arrow: true,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvsRuleSet {
    pub version: PvsVersion,
    pub call_names: BTreeSet<String>,
    pub operators: BTreeSet<String>,
    #[serde(default)]
    pub structural: StructuralTriggers,
    /// Add the `;` closing the smallest enclosing statement to full-mode sets.
    #[serde(default = "default_true")]
    pub include_terminator: bool,
}

fn owned(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl PvsRuleSet {
    pub fn v1() -> Self {
        PvsRuleSet {
            version: PvsVersion::V1,
            call_names: owned(V1_CALLS),
            operators: owned(V1_OPERATORS),
            structural: StructuralTriggers::default(),
            include_terminator: true,
        }
    }

    pub fn v2() -> Self {
        PvsRuleSet {
            version: PvsVersion::V2,
            call_names: owned(V2_CALLS),
            operators: owned(V2_OPERATORS),
            ..Self::v1()
        }
    }

    pub fn v3() -> Self {
        PvsRuleSet {
            version: PvsVersion::V3,
            ..Self::v2()
        }
    }

    pub fn for_version(version: PvsVersion) -> Self {
        match version {
            PvsVersion::V1 => Self::v1(),
            PvsVersion::V2 => Self::v2(),
            PvsVersion::V3 => Self::v3(),
        }
    }

    pub fn abstracted(&self) -> bool {
        self.version == PvsVersion::V3
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rules: PvsRuleSet = serde_json::from_str(text)?;
        if rules.call_names.iter().any(|n| n.trim().is_empty())
            || rules.operators.iter().any(|o| o.trim().is_empty())
        {
            return Err(Error::InvalidConfig("rule set contains an empty name".into()));
        }
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_owned()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Whether `id` is an expression these rules flag.
    pub fn triggers(&self, ast: &Ast, id: NodeId) -> bool {
        let node = ast.node(id);
        match node.kind {
            "call_expression" => ast
                .child_by_field(id, "function")
                .filter(|f| ast.node(*f).kind == "identifier")
                .is_some_and(|f| self.call_names.contains(ast.text(f))),
            "subscript_expression" => self.structural.subscript,
            "pointer_expression" => {
                self.structural.pointer_deref && operator_text(ast, id) == Some("*")
            }
            "field_expression" => {
                self.structural.field_arrow && operator_text(ast, id) == Some("->")
            }
            "binary_expression" | "update_expression" | "assignment_expression" => {
                operator_text(ast, id).is_some_and(|op| self.operators.contains(op))
            }
            _ => false,
        }
    }
}

fn operator_terminal(ast: &Ast, id: NodeId) -> Option<usize> {
    if let Some(op) = ast.child_by_field(id, "operator") {
        return ast.node(op).terminal;
    }
    // field_expression in some grammar revisions leaves the arrow unnamed
    ast.terminal_children(id, "->").next()
}

fn operator_text(ast: &Ast, id: NodeId) -> Option<&str> {
    operator_terminal(ast, id).map(|t| ast.terminals()[t].text.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Pvs,
    BuggyPath,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Pvs => "pvs",
            FeatureKind::BuggyPath => "buggy_path",
        })
    }
}

/// The bug set B for one function: unordered (PVS) or a source-ordered path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugFeatureSet {
    pub kind: FeatureKind,
    /// Terminal indices, ascending and duplicate-free.
    pub tokens: Vec<usize>,
    pub path_id: Option<u32>,
}

impl BugFeatureSet {
    pub fn pvs(tokens: TokenSet) -> Self {
        BugFeatureSet {
            kind: FeatureKind::Pvs,
            tokens: tokens.into_iter().collect(),
            path_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_set(&self) -> TokenSet {
        self.tokens.iter().copied().collect()
    }
}

fn descendants(ast: &Ast, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
    let mut stack = vec![id];
    std::iter::from_fn(move || {
        let next = stack.pop()?;
        stack.extend(ast.node(next).children.iter().rev().copied());
        Some(next)
    })
}

fn is_statement(kind: &str) -> bool {
    kind.ends_with("_statement") || kind == "declaration"
}

/// The `;` closing the smallest statement around `id`, if that statement ends in one.
fn statement_terminator(ast: &Ast, id: NodeId) -> Option<usize> {
    let stmt = ast.ancestors(id).find(|a| is_statement(ast.node(*a).kind))?;
    let last = *ast.node(stmt).children.last()?;
    ast.node(last)
        .terminal
        .filter(|t| ast.terminals()[*t].text == ";")
}

/// The abstracted tokens of every triggered expression inside `expr`
/// (including `expr` itself): callee names, operators, subscript brackets.
pub fn abstract_expression(ast: &Ast, expr: NodeId, rules: &PvsRuleSet) -> TokenSet {
    let mut out = TokenSet::new();
    for id in descendants(ast, expr) {
        if rules.triggers(ast, id) {
            abstract_one(ast, id, &mut out);
        }
    }
    out
}

fn abstract_one(ast: &Ast, id: NodeId, out: &mut TokenSet) {
    match ast.node(id).kind {
        "call_expression" => {
            if let Some(t) = ast
                .child_by_field(id, "function")
                .and_then(|f| ast.node(f).terminal)
            {
                out.insert(t);
            }
        }
        "subscript_expression" => {
            out.extend(ast.terminal_children(id, "["));
            out.extend(ast.terminal_children(id, "]"));
        }
        _ => out.extend(operator_terminal(ast, id)),
    }
}

pub fn extract_pvs(ast: &Ast, rules: &PvsRuleSet) -> BugFeatureSet {
    if rules.abstracted() {
        return BugFeatureSet::pvs(abstract_expression(ast, ast.root(), rules));
    }
    let mut tokens = TokenSet::new();
    for (id, node) in ast.nodes() {
        if !rules.triggers(ast, id) {
            continue;
        }
        tokens.extend(node.terminals.clone());
        if rules.include_terminator {
            tokens.extend(statement_terminator(ast, id));
        }
    }
    BugFeatureSet::pvs(tokens)
}

/// One buggy path per trace, in trace order. Traces that touch no terminal
/// come back empty; callers decide whether to drop them.
pub fn extract_buggy_paths(ast: &Ast, function: &SourceFunction) -> Vec<BugFeatureSet> {
    function
        .bug_line_traces
        .iter()
        .enumerate()
        .map(|(i, trace)| {
            let lines: BTreeSet<u32> = trace.iter().copied().collect();
            BugFeatureSet {
                kind: FeatureKind::BuggyPath,
                tokens: ast.tokens_on_lines(&lines),
                path_id: Some(i as u32),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelStats {
    pub programs: usize,
    pub mean_pvs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PvsStatistics {
    pub version: PvsVersion,
    pub vulnerable: LabelStats,
    pub non_vulnerable: LabelStats,
    /// vulnerable mean / non-vulnerable mean
    pub ratio: f64,
    pub skipped: usize,
}

/// Mean token-level |PVS| per label from precomputed `(label, |B|)` pairs.
pub fn pvs_statistics_from_counts(
    version: PvsVersion,
    counts: &[(Label, usize)],
    skipped: usize,
) -> Result<PvsStatistics> {
    let mut sums: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (label, n) in counts {
        let e = sums.entry(*label).or_default();
        e.0 += 1;
        e.1 += n;
    }
    let stats = |label| -> Result<LabelStats> {
        let (programs, total) = sums.get(&label).copied().unwrap_or_default();
        if programs == 0 {
            return Err(Error::EmptyLabelClass(label));
        }
        Ok(LabelStats {
            programs,
            mean_pvs: total as f64 / programs as f64,
        })
    };
    let vulnerable = stats(Label::Vulnerable)?;
    let non_vulnerable = stats(Label::NonVulnerable)?;
    Ok(PvsStatistics {
        version,
        vulnerable,
        non_vulnerable,
        ratio: vulnerable.mean_pvs / non_vulnerable.mean_pvs,
        skipped,
    })
}

pub fn pvs_statistics(corpus: &[SourceFunction], rules: &PvsRuleSet) -> Result<PvsStatistics> {
    let mut counts = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for f in corpus {
        match parse(&f.code) {
            Ok(ast) => counts.push((f.label, extract_pvs(&ast, rules).len())),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.id);
                skipped += 1;
            }
        }
    }
    pvs_statistics_from_counts(rules.version, &counts, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceStatistics {
    pub programs: usize,
    pub programs_with_traces: usize,
    pub total_traces: usize,
    /// Mean trace count over programs that have at least one trace.
    pub mean_traces: f64,
}

pub fn trace_statistics(corpus: &[SourceFunction]) -> TraceStatistics {
    let with: Vec<usize> = corpus
        .iter()
        .map(|f| f.bug_line_traces.len())
        .filter(|n| *n > 0)
        .collect();
    let total: usize = with.iter().sum();
    TraceStatistics {
        programs: corpus.len(),
        programs_with_traces: with.len(),
        total_traces: total,
        mean_traces: if with.is_empty() {
            0.0
        } else {
            total as f64 / with.len() as f64
        },
    }
}
