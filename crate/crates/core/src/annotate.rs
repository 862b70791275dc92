//! PVS-annotated model inputs.
//!
//! Mark wraps every input token that falls inside the PVS in a begin/end
//! marker pair. Prepend copies those tokens (at most 100) in front of the
//! code behind a separator. Both keep the sequence within the context limit
//! by cutting code tokens from the tail; leading and trailing special tokens
//! are always kept.
//!
//! Without tokenizer offsets the AST tokens themselves are the input tokens
//! (pre-tokenization mode).

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{ast_input_tokens, build_alignment, InputToken, TokenAlignment};
use crate::ast::{parse, SourceFunction};
use crate::error::{Error, Result};
use crate::features::{extract_pvs, PvsRuleSet, PvsVersion};
use crate::TokenSet;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    #[default]
    Baseline,
    Mark,
    Prepend,
}

impl AnnotationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::Baseline => "baseline",
            AnnotationMode::Mark => "mark",
            AnnotationMode::Prepend => "prepend",
        }
    }
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AnnotationMode::Baseline),
            "mark" => Ok(AnnotationMode::Mark),
            "prepend" => Ok(AnnotationMode::Prepend),
            _ => Err(Error::InvalidConfig(format!("unknown annotation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub begin_marker: String,
    pub end_marker: String,
    pub separator: String,
    pub context_limit: usize,
    pub max_prepend: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            begin_marker: "<vul-b>".into(),
            end_marker: "<vul-e>".into(),
            separator: "[SEP]".into(),
            context_limit: 512,
            max_prepend: 100,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_limit < 3 {
            return Err(Error::InvalidConfig(format!(
                "context limit {} leaves no room for code",
                self.context_limit
            )));
        }
        if self.begin_marker == self.end_marker {
            return Err(Error::InvalidConfig("begin and end markers must differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedExample {
    pub id: String,
    pub mode: AnnotationMode,
    pub tokens: Vec<String>,
    /// Output positions of the prepended block.
    pub b_extension: Vec<usize>,
    /// For each output token, the input token it reproduces in place
    /// (None for markers, separators and prepended copies).
    pub origin: Vec<Option<usize>>,
    /// Prepend mode with nothing to prepend.
    pub degenerate: bool,
}

impl AnnotatedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Output positions of in-place tokens whose AST token is in `b`.
    pub fn project_bug_set(&self, align: &TokenAlignment, b: &TokenSet) -> TokenSet {
        self.origin
            .iter()
            .enumerate()
            .filter_map(|(pos, o)| {
                let ast = align.get((*o)?)?;
                b.contains(&ast).then_some(pos)
            })
            .collect()
    }
}

/// Splits input tokens into leading specials, code and trailing specials.
fn partition(input: &[InputToken]) -> (usize, usize) {
    let start = input.iter().position(|t| !t.is_special()).unwrap_or(input.len());
    let end = input.iter().rposition(|t| !t.is_special()).map_or(start, |i| i + 1);
    (start, end)
}

fn in_pvs(align: &TokenAlignment, pvs: &TokenSet, i: usize) -> bool {
    align.get(i).is_some_and(|a| pvs.contains(&a))
}

struct Builder<'a> {
    input: &'a [InputToken],
    tokens: Vec<String>,
    origin: Vec<Option<usize>>,
}

impl<'a> Builder<'a> {
    fn new(input: &'a [InputToken]) -> Self {
        Builder {
            input,
            tokens: Vec::new(),
            origin: Vec::new(),
        }
    }

    fn keep(&mut self, i: usize) {
        self.tokens.push(self.input[i].text.clone());
        self.origin.push(Some(i));
    }

    fn insert(&mut self, text: &str) {
        self.tokens.push(text.to_owned());
        self.origin.push(None);
    }
}

fn check_lengths(input: &[InputToken], align: &TokenAlignment) -> Result<()> {
    if input.len() != align.input_len() {
        return Err(Error::LengthMismatch {
            what: "token alignment",
            expected: input.len(),
            actual: align.input_len(),
        });
    }
    Ok(())
}

/// Input passed through, cut to the context limit.
pub fn baseline_annotate(id: &str, input: &[InputToken], cfg: &AnnotationConfig) -> AnnotatedExample {
    let (start, end) = partition(input);
    let room = cfg.context_limit.saturating_sub(start + input.len() - end);
    let mut b = Builder::new(input);
    (0..start).for_each(|i| b.keep(i));
    (start..end).take(room).for_each(|i| b.keep(i));
    (end..input.len()).for_each(|i| b.keep(i));
    AnnotatedExample {
        id: id.to_owned(),
        mode: AnnotationMode::Baseline,
        tokens: b.tokens,
        b_extension: Vec::new(),
        origin: b.origin,
        degenerate: false,
    }
}

pub fn mark_annotate(
    id: &str,
    input: &[InputToken],
    align: &TokenAlignment,
    pvs: &TokenSet,
    cfg: &AnnotationConfig,
) -> Result<AnnotatedExample> {
    check_lengths(input, align)?;
    let (start, end) = partition(input);
    let mut room = cfg.context_limit.saturating_sub(start + input.len() - end);
    let mut b = Builder::new(input);
    (0..start).for_each(|i| b.keep(i));
    for i in start..end {
        let marked = in_pvs(align, pvs, i);
        let width = if marked { 3 } else { 1 };
        if width > room {
            break;
        }
        room -= width;
        if marked {
            b.insert(&cfg.begin_marker);
            b.keep(i);
            b.insert(&cfg.end_marker);
        } else {
            b.keep(i);
        }
    }
    (end..input.len()).for_each(|i| b.keep(i));
    Ok(AnnotatedExample {
        id: id.to_owned(),
        mode: AnnotationMode::Mark,
        tokens: b.tokens,
        b_extension: Vec::new(),
        origin: b.origin,
        degenerate: false,
    })
}

pub fn prepend_annotate(
    id: &str,
    input: &[InputToken],
    align: &TokenAlignment,
    pvs: &TokenSet,
    cfg: &AnnotationConfig,
) -> Result<AnnotatedExample> {
    check_lengths(input, align)?;
    let (start, end) = partition(input);
    let specials = start + input.len() - end;
    let budget = cfg.context_limit.saturating_sub(specials + 1);
    let block: Vec<usize> = (start..end)
        .filter(|i| in_pvs(align, pvs, *i))
        .take(cfg.max_prepend.min(budget))
        .collect();
    let room = budget - block.len();

    let mut b = Builder::new(input);
    (0..start).for_each(|i| b.keep(i));
    let b_extension: Vec<usize> = (b.tokens.len()..b.tokens.len() + block.len()).collect();
    for &i in &block {
        b.insert(&input[i].text);
    }
    b.insert(&cfg.separator);
    (start..end).take(room).for_each(|i| b.keep(i));
    (end..input.len()).for_each(|i| b.keep(i));
    Ok(AnnotatedExample {
        id: id.to_owned(),
        mode: AnnotationMode::Prepend,
        tokens: b.tokens,
        degenerate: block.is_empty(),
        b_extension,
        origin: b.origin,
    })
}

pub fn annotate(
    id: &str,
    mode: AnnotationMode,
    input: &[InputToken],
    align: &TokenAlignment,
    pvs: &TokenSet,
    cfg: &AnnotationConfig,
) -> Result<AnnotatedExample> {
    match mode {
        AnnotationMode::Baseline => {
            check_lengths(input, align)?;
            Ok(baseline_annotate(id, input, cfg))
        }
        AnnotationMode::Mark => mark_annotate(id, input, align, pvs, cfg),
        AnnotationMode::Prepend => prepend_annotate(id, input, align, pvs, cfg),
    }
}

/// `b` (already in output positions) plus the prepended block.
pub fn extend_bug_set_for_prepend(b: &TokenSet, annotated: &AnnotatedExample) -> Result<TokenSet> {
    if annotated.mode != AnnotationMode::Prepend {
        return Err(Error::ModeMismatch {
            expected: AnnotationMode::Prepend.as_str(),
            actual: annotated.mode.as_str(),
        });
    }
    Ok(b.iter().chain(&annotated.b_extension).copied().collect())
}

/// One line of an annotated training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub id: String,
    pub label: u8,
    pub mode: AnnotationMode,
    pub tokens: Vec<String>,
    pub b_extension: Vec<usize>,
    pub pvs_version: PvsVersion,
}

/// Parses, extracts the PVS and annotates one function. `input` is the
/// model's tokenization of the normalized code; None selects
/// pre-tokenization mode.
pub fn annotate_function(
    function: &SourceFunction,
    input: Option<&[InputToken]>,
    mode: AnnotationMode,
    rules: &PvsRuleSet,
    cfg: &AnnotationConfig,
) -> Result<AnnotatedRecord> {
    let ast = parse(&function.code)?;
    let pvs = extract_pvs(&ast, rules).as_set();
    let (input, align) = match input {
        Some(tokens) => (tokens.to_vec(), build_alignment(&ast, tokens)?),
        None => (ast_input_tokens(&ast), TokenAlignment::identity(ast.len())),
    };
    let out = annotate(&function.id, mode, &input, &align, &pvs, cfg)?;
    if out.degenerate {
        log::debug!("{}: empty PVS, nothing prepended", function.id);
    }
    Ok(AnnotatedRecord {
        id: out.id,
        label: function.label.as_int(),
        mode,
        tokens: out.tokens,
        b_extension: out.b_extension,
        pvs_version: rules.version,
    })
}

/// Annotates a corpus in pre-tokenization mode, in corpus order. Failing
/// examples are logged and returned separately.
pub fn emit_training_corpus(
    corpus: &[SourceFunction],
    mode: AnnotationMode,
    rules: &PvsRuleSet,
    cfg: &AnnotationConfig,
) -> (Vec<AnnotatedRecord>, Vec<(String, Error)>) {
    let mut ok = Vec::with_capacity(corpus.len());
    let mut failed = Vec::new();
    for f in corpus {
        match annotate_function(f, None, mode, rules, cfg) {
            Ok(r) => ok.push(r),
            Err(e) => {
                log::warn!("{}: skipped: {e}", f.id);
                failed.push((f.id.clone(), e));
            }
        }
    }
    (ok, failed)
}

pub fn write_annotated(path: &Path, records: &[AnnotatedRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
