//! IoU-based alignment between model-important token sets M and bug sets B.
//!
//! Every selection breaks ties by ascending index (token index for scores,
//! `(row, col)` for matrix cells) so results are reproducible.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::align::{aggregate_attention, AttentionPooling, Coverage, TokenAlignment};
use crate::dump::AttentionTensor;
use crate::error::{Error, Result};
use crate::TokenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// top-k attribution IoU
    Interpret,
    /// per-head top-k attention-incident IoU
    Attention,
    /// top-k interaction-matrix-incident IoU
    Interaction,
    PairProportion,
    JointProb,
    /// longest run of path edges among the top-t IM cells
    Chain,
    /// share of path edges among the top-t IM cells
    Coverage,
    /// connected components of the path under the top-t IM cells
    Components,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::Interpret,
        MetricKind::Attention,
        MetricKind::Interaction,
        MetricKind::PairProportion,
        MetricKind::JointProb,
        MetricKind::Chain,
        MetricKind::Coverage,
        MetricKind::Components,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Interpret => "interpret",
            MetricKind::Attention => "attention",
            MetricKind::Interaction => "interaction",
            MetricKind::PairProportion => "pair_proportion",
            MetricKind::JointProb => "joint_prob",
            MetricKind::Chain => "chain",
            MetricKind::Coverage => "coverage",
            MetricKind::Components => "components",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric {s:?}")))
    }
}

/// One alignment measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub example_id: String,
    pub metric: MetricKind,
    pub tool: Option<String>,
    pub layer: Option<u32>,
    pub head: Option<u32>,
    pub path_id: Option<u32>,
    /// Node count of the path, for path metrics.
    pub path_len: Option<u32>,
    pub k: u32,
    pub score: f64,
}

impl AlignmentRecord {
    pub fn new(example_id: impl Into<String>, metric: MetricKind, k: usize, score: f64) -> Self {
        AlignmentRecord {
            example_id: example_id.into(),
            metric,
            tool: None,
            layer: None,
            head: None,
            path_id: None,
            path_len: None,
            k: k as u32,
            score,
        }
    }

    /// Report row order.
    pub fn sort_key(&self) -> impl Ord + '_ {
        (
            self.example_id.as_str(),
            self.metric,
            self.layer,
            self.head,
            self.path_id,
            self.tool.as_deref(),
            self.k,
        )
    }
}

pub fn iou(m: &TokenSet, b: &TokenSet) -> Result<f64> {
    let inter = m.intersection(b).count();
    let union = m.len() + b.len() - inter;
    if union == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// Descending score, then ascending index.
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` highest-scoring token indices.
pub fn top_k_tokens(scores: &[f64], k: usize) -> Result<TokenSet> {
    if k == 0 || k > scores.len() {
        return Err(Error::KOutOfRange {
            k,
            available: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| rank((scores[*a], *a), (scores[*b], *b)));
    Ok(order.into_iter().take(k).collect())
}

/// All cells of a square matrix, best first.
pub fn ranked_cells(m: ArrayView2<f64>) -> Vec<(usize, usize)> {
    let n = m.ncols();
    let mut flat: Vec<usize> = (0..m.len()).collect();
    flat.sort_by(|a, b| rank((m[[a / n, a % n]], *a), (m[[b / n, b % n]], *b)));
    flat.into_iter().map(|f| (f / n, f % n)).collect()
}

/// The first `t` cells of [`ranked_cells`], without sorting the rest.
pub fn top_cells(m: ArrayView2<f64>, t: usize) -> Vec<(usize, usize)> {
    let n = m.ncols();
    let t = t.min(m.len());
    if t == 0 {
        return Vec::new();
    }
    let mut flat: Vec<usize> = (0..m.len()).collect();
    let cmp = |a: &usize, b: &usize| rank((m[[a / n, a % n]], *a), (m[[b / n, b % n]], *b));
    if t < flat.len() {
        flat.select_nth_unstable_by(t - 1, cmp);
        flat.truncate(t);
    }
    flat.sort_by(cmp);
    flat.into_iter().map(|f| (f / n, f % n)).collect()
}

/// Walks cells from the highest score down, collecting both endpoints of
/// each (row first) until `k` tokens are gathered.
pub fn top_k_incident_tokens(att: ArrayView2<f64>, k: usize) -> Result<TokenSet> {
    let (rows, cols) = att.dim();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if k == 0 || k > rows {
        return Err(Error::KOutOfRange { k, available: rows });
    }
    let mut out = TokenSet::new();
    for (r, c) in ranked_cells(att) {
        for t in [r, c] {
            out.insert(t);
            if out.len() == k {
                return Ok(out);
            }
        }
    }
    unreachable!("every token is an endpoint of some cell")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolScore {
    pub tool: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretAlignment {
    pub k: usize,
    pub per_tool: Vec<ToolScore>,
    pub mean: f64,
}

/// IoU of each tool's top-|B| tokens with B, plus the mean over tools.
///
/// Scores are AST-level; only covered tokens take part, and B is first
/// restricted to them.
pub fn alignment_interpret(
    tools: &BTreeMap<String, Vec<f64>>,
    coverage: &Coverage,
    b: &TokenSet,
) -> Result<InterpretAlignment> {
    if tools.is_empty() {
        return Err(Error::InvalidConfig("no attribution tools".into()));
    }
    let b_local = coverage.to_compact_set(b);
    if b_local.is_empty() {
        return Err(Error::EmptyBugSet);
    }
    let k = b_local.len();
    let mut per_tool = Vec::with_capacity(tools.len());
    for (tool, scores) in tools {
        if scores.len() != coverage.universe() {
            return Err(Error::LengthMismatch {
                what: "AST-level attribution",
                expected: coverage.universe(),
                actual: scores.len(),
            });
        }
        let local = coverage.restrict_scores(scores);
        let m = top_k_tokens(&local, k)?;
        per_tool.push(ToolScore {
            tool: tool.clone(),
            score: iou(&m, &b_local)?,
        });
    }
    let mean = per_tool.iter().map(|t| t.score).sum::<f64>() / per_tool.len() as f64;
    Ok(InterpretAlignment { k, per_tool, mean })
}

/// IoU of the top-|B| attention-incident tokens of an AST-level matrix with B.
pub fn attention_iou(att: ArrayView2<f64>, coverage: &Coverage, b: &TokenSet) -> Result<(usize, f64)> {
    let b_local = coverage.to_compact_set(b);
    if b_local.is_empty() {
        return Err(Error::EmptyBugSet);
    }
    let local = coverage.restrict_matrix(att);
    let m = top_k_incident_tokens(local.view(), b_local.len())?;
    Ok((b_local.len(), iou(&m, &b_local)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScore {
    pub layer: u32,
    pub head: u32,
    pub k: usize,
    pub score: f64,
}

/// Attention alignment for every layer and head, with no minimum-edge filter.
pub fn alignment_attention(
    tensor: &AttentionTensor,
    align: &TokenAlignment,
    b: &TokenSet,
    pooling: AttentionPooling,
) -> Result<Vec<HeadScore>> {
    let coverage = align.coverage();
    let mut out = Vec::with_capacity(tensor.layers() * tensor.heads());
    for layer in 0..tensor.layers() {
        for head in 0..tensor.heads() {
            let pooled = aggregate_attention(tensor.head_f64(layer, head).view(), align, pooling)?;
            let (k, score) = attention_iou(pooled.view(), &coverage, b)?;
            out.push(HeadScore {
                layer: layer as u32,
                head: head as u32,
                k,
                score,
            });
        }
    }
    Ok(out)
}

/// Share of above-threshold cells whose two endpoints both lie in B.
pub fn pair_proportion(att: ArrayView2<f64>, b: &TokenSet, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidThreshold(theta));
    }
    let mut high = 0usize;
    let mut inside = 0usize;
    for ((r, c), v) in att.indexed_iter() {
        if *v > theta {
            high += 1;
            if b.contains(&r) && b.contains(&c) {
                inside += 1;
            }
        }
    }
    if high == 0 {
        return Err(Error::NoHighAttention(theta));
    }
    Ok(inside as f64 / high as f64)
}
