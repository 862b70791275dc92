//! Mapping model input tokens (subwords) onto AST terminals, and pooling
//! per-input-token scores up to AST-token granularity.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::ast::Ast;
use crate::error::{Error, Result};
use crate::TokenSet;

/// Fraction of non-special input tokens allowed to overlap nothing.
pub const MAX_UNALIGNED_FRACTION: f64 = 0.10;

/// A model input token. `char_span` is a half-open character range into
/// the normalized code; special tokens (`<s>`, `[SEP]`, ...) have none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputToken {
    pub index: usize,
    pub text: String,
    pub char_span: Option<Range<usize>>,
}

impl InputToken {
    pub fn new(index: usize, text: impl Into<String>, char_span: Option<Range<usize>>) -> Self {
        InputToken {
            index,
            text: text.into(),
            char_span,
        }
    }

    pub fn is_special(&self) -> bool {
        self.char_span.is_none()
    }
}

/// One input token per AST terminal, spanning it exactly.
pub fn ast_input_tokens(ast: &Ast) -> Vec<InputToken> {
    let spans = terminal_char_spans(ast);
    ast.terminals()
        .iter()
        .zip(spans)
        .map(|(t, span)| InputToken::new(t.index, t.text.clone(), Some(span)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlignment {
    map: Vec<Option<usize>>,
    ast_len: usize,
}

impl TokenAlignment {
    /// Builds an alignment from an explicit map; entries must be `< ast_len`.
    pub fn from_map(map: Vec<Option<usize>>, ast_len: usize) -> Result<Self> {
        if let Some(bad) = map.iter().flatten().find(|t| **t >= ast_len) {
            return Err(Error::LengthMismatch {
                what: "alignment target",
                expected: ast_len,
                actual: *bad,
            });
        }
        Ok(TokenAlignment { map, ast_len })
    }

    pub fn identity(len: usize) -> Self {
        TokenAlignment {
            map: (0..len).map(Some).collect(),
            ast_len: len,
        }
    }

    pub fn input_len(&self) -> usize {
        self.map.len()
    }

    pub fn ast_len(&self) -> usize {
        self.ast_len
    }

    pub fn get(&self, input: usize) -> Option<usize> {
        self.map.get(input).copied().flatten()
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.map
    }

    /// Number of input tokens mapped onto each AST token.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.ast_len];
        for t in self.map.iter().flatten() {
            counts[*t] += 1;
        }
        counts
    }

    pub fn coverage(&self) -> Coverage {
        Coverage::new(self.counts().iter().map(|c| *c > 0).collect())
    }
}

fn terminal_char_spans(ast: &Ast) -> Vec<Range<usize>> {
    let src = ast.source();
    if src.is_ascii() {
        return ast.terminals().iter().map(|t| t.span.clone()).collect();
    }
    let char_at = |byte: usize| src[..byte].chars().count();
    ast.terminals()
        .iter()
        .map(|t| {
            let start = char_at(t.span.start);
            start..start + t.text.chars().count()
        })
        .collect()
}

/// Maps every input token with a span to the AST token it overlaps most,
/// preferring the earlier AST token on ties.
pub fn build_alignment(ast: &Ast, input: &[InputToken]) -> Result<TokenAlignment> {
    let spans = terminal_char_spans(ast);
    let mut map = Vec::with_capacity(input.len());
    let mut regular = 0;
    let mut unaligned = 0;
    for tok in input {
        let Some(span) = &tok.char_span else {
            map.push(None);
            continue;
        };
        regular += 1;
        let first = spans.partition_point(|s| s.end <= span.start);
        let mut best: Option<(usize, usize)> = None;
        for (i, s) in spans.iter().enumerate().skip(first) {
            if s.start >= span.end {
                break;
            }
            let overlap = s.end.min(span.end).saturating_sub(s.start.max(span.start));
            if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((i, overlap));
            }
        }
        if best.is_none() {
            unaligned += 1;
        }
        map.push(best.map(|(i, _)| i));
    }
    if unaligned as f64 > MAX_UNALIGNED_FRACTION * regular as f64 {
        return Err(Error::MisalignedDump {
            unaligned,
            total: regular,
        });
    }
    Ok(TokenAlignment {
        map,
        ast_len: ast.len(),
    })
}

/// Per-AST-token scores; tokens no input token maps onto are `covered = false`
/// and score zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AstScores {
    pub scores: Vec<f64>,
    pub covered: Vec<bool>,
}

pub fn aggregate_attribution(attr: &[f64], align: &TokenAlignment) -> Result<AstScores> {
    if attr.len() != align.input_len() {
        return Err(Error::LengthMismatch {
            what: "attribution vector",
            expected: align.input_len(),
            actual: attr.len(),
        });
    }
    let mut sums = vec![0.0; align.ast_len()];
    let counts = align.counts();
    for (score, target) in attr.iter().zip(align.as_slice()) {
        if let Some(t) = target {
            sums[*t] += score;
        }
    }
    let scores = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();
    Ok(AstScores {
        scores,
        covered: counts.iter().map(|c| *c > 0).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPooling {
    /// Mean over the whole block of input-token pairs.
    #[default]
    BlockMean,
    /// Mean over query pieces, sum over key pieces (keeps rows stochastic).
    RowMean,
}

/// Pools an `n x n` input-token matrix into an `m x m` AST-token matrix.
/// Rows and columns of uncovered AST tokens are zero.
pub fn aggregate_attention(
    att: ArrayView2<f64>,
    align: &TokenAlignment,
    pooling: AttentionPooling,
) -> Result<Array2<f64>> {
    let (rows, cols) = att.dim();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows != align.input_len() {
        return Err(Error::LengthMismatch {
            what: "attention matrix",
            expected: align.input_len(),
            actual: rows,
        });
    }
    let m = align.ast_len();
    let map = align.as_slice();
    let mut by_col = Array2::<f64>::zeros((rows, m));
    for (i, row) in att.outer_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(c) = map[j] {
                by_col[[i, c]] += v;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((m, m));
    for (i, target) in map.iter().enumerate() {
        if let Some(r) = target {
            let mut dst = out.row_mut(*r);
            dst += &by_col.row(i);
        }
    }
    let counts = align.counts();
    for ((r, c), v) in out.indexed_iter_mut() {
        let denom = match pooling {
            AttentionPooling::BlockMean => counts[r] * counts[c],
            AttentionPooling::RowMean => counts[r],
        };
        if denom > 0 {
            *v /= denom as f64;
        }
    }
    Ok(out)
}

/// The AST tokens a model actually saw, with a compact re-indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    tokens: Vec<usize>,
    position: Vec<Option<usize>>,
}

impl Coverage {
    pub fn new(covered: Vec<bool>) -> Self {
        let mut tokens = Vec::new();
        let position = covered
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.then(|| {
                    tokens.push(i);
                    tokens.len() - 1
                })
            })
            .collect();
        Coverage { tokens, position }
    }

    pub fn full(len: usize) -> Self {
        Coverage::new(vec![true; len])
    }

    /// Number of covered tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn universe(&self) -> usize {
        self.position.len()
    }

    pub fn is_covered(&self, ast_index: usize) -> bool {
        self.compact(ast_index).is_some()
    }

    pub fn compact(&self, ast_index: usize) -> Option<usize> {
        self.position.get(ast_index).copied().flatten()
    }

    pub fn ast_index(&self, compact: usize) -> usize {
        self.tokens[compact]
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Covered members of `set`, in AST index space.
    pub fn filter_set(&self, set: &TokenSet) -> TokenSet {
        set.iter().copied().filter(|t| self.is_covered(*t)).collect()
    }

    pub fn to_compact_set(&self, set: &TokenSet) -> TokenSet {
        set.iter().filter_map(|t| self.compact(*t)).collect()
    }

    pub fn to_ast_set(&self, set: &TokenSet) -> TokenSet {
        set.iter().map(|c| self.tokens[*c]).collect()
    }

    pub fn restrict_scores(&self, scores: &[f64]) -> Vec<f64> {
        self.tokens.iter().map(|t| scores[*t]).collect()
    }

    pub fn restrict_matrix(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let k = self.tokens.len();
        Array2::from_shape_fn((k, k), |(r, c)| m[[self.tokens[r], self.tokens[c]]])
    }
}
