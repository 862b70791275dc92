//! Per-example alignment: one function, its bug feature sets and its model
//! dump in; alignment records out.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::{aggregate_attention, aggregate_attribution, build_alignment, AttentionPooling, Coverage};
use crate::ast::Ast;
use crate::dump::ModelDump;
use crate::error::{Error, Result};
use crate::features::{BugFeatureSet, FeatureKind};
use crate::interaction::{
    build_interaction_matrix, default_top_t, induced_components, longest_chain, path_joint_probability,
    InteractionMatrix,
};
use crate::TokenSet;
use crate::metrics::{iou, pair_proportion, top_k_incident_tokens, top_k_tokens, AlignmentRecord, MetricKind};

/// How many tokens the model-important set M holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    /// k = |B| over covered tokens.
    #[default]
    BugSetSize,
    /// A fixed k, clipped to the covered-token count.
    Fixed(usize),
}

impl KPolicy {
    pub fn resolve(self, b_len: usize, covered: usize) -> usize {
        match self {
            KPolicy::BugSetSize => b_len,
            KPolicy::Fixed(k) => k,
        }
        .min(covered)
    }
}

impl std::str::FromStr for KPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "b" || s == "|b|" || s == "bug-set" {
            return Ok(KPolicy::BugSetSize);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(KPolicy::Fixed(k)),
            _ => Err(Error::InvalidConfig(format!("k must be \"b\" or a positive integer, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub metrics: BTreeSet<MetricKind>,
    pub k: KPolicy,
    /// Attention threshold for the pair proportion.
    pub theta: f64,
    /// Top-t for the chain and component measures; None picks a default per path.
    pub top_t: Option<usize>,
    pub pooling: AttentionPooling,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            metrics: [MetricKind::Interpret, MetricKind::Attention, MetricKind::Interaction]
                .into_iter()
                .collect(),
            k: KPolicy::BugSetSize,
            theta: 0.3,
            top_t: None,
            pooling: AttentionPooling::BlockMean,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig("no metric selected".into()));
        }
        if self.metrics.contains(&MetricKind::PairProportion) && !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidThreshold(self.theta));
        }
        if self.top_t == Some(0) {
            return Err(Error::InvalidTopT);
        }
        Ok(())
    }

    fn wants(&self, m: MetricKind) -> bool {
        self.metrics.contains(&m)
    }

    fn needs_attention(&self) -> bool {
        self.wants(MetricKind::Attention) || self.wants(MetricKind::PairProportion)
    }

    fn needs_im(&self) -> bool {
        [
            MetricKind::Interaction,
            MetricKind::JointProb,
            MetricKind::Chain,
            MetricKind::Coverage,
            MetricKind::Components,
        ]
        .iter()
        .any(|m| self.wants(*m))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleOutcome {
    pub records: Vec<AlignmentRecord>,
    /// Feature sets with nothing left after restriction to covered tokens.
    pub empty_sets: usize,
    /// Paths too short for the path measures.
    pub short_paths: usize,
}

fn record(id: &str, set: &BugFeatureSet, metric: MetricKind, k: usize, score: f64) -> AlignmentRecord {
    AlignmentRecord {
        path_id: set.path_id,
        ..AlignmentRecord::new(id, metric, k, score)
    }
}

/// Path tokens the model saw, in order, with consecutive repeats removed.
fn covered_path(set: &BugFeatureSet, coverage: &Coverage) -> Vec<usize> {
    let mut p: Vec<usize> = set.tokens.iter().copied().filter(|t| coverage.is_covered(*t)).collect();
    p.dedup();
    p
}

pub fn align_example(
    ast: &Ast,
    sets: &[BugFeatureSet],
    dump: &ModelDump,
    cfg: &AlignConfig,
) -> Result<ExampleOutcome> {
    let id = dump.example_id.as_str();
    let align = build_alignment(ast, &dump.tokens)?;
    let coverage = align.coverage();
    if coverage.is_empty() {
        return Err(Error::NoCoveredTokens);
    }

    let mut out = ExampleOutcome::default();
    let visible: Vec<(&BugFeatureSet, TokenSet)> = sets
        .iter()
        .filter_map(|set| {
            let b = coverage.to_compact_set(&set.as_set());
            if b.is_empty() {
                out.empty_sets += 1;
                None
            } else {
                Some((set, b))
            }
        })
        .collect();
    if visible.is_empty() {
        return Ok(out);
    }

    let attributions: Vec<(&String, Vec<f64>)> = if cfg.wants(MetricKind::Interpret) {
        if dump.attributions.is_empty() {
            log::warn!("{id}: no attribution tools in dump");
        }
        dump.attributions
            .iter()
            .map(|(tool, scores)| Ok((tool, coverage.restrict_scores(&aggregate_attribution(scores, &align)?.scores))))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let heads: Vec<(u32, u32, Array2<f64>)> = if cfg.needs_attention() {
        let tensor = dump.attention()?;
        let mut v = Vec::with_capacity(tensor.layers() * tensor.heads());
        for l in 0..tensor.layers() {
            for h in 0..tensor.heads() {
                let pooled = aggregate_attention(tensor.head_f64(l, h).view(), &align, cfg.pooling)?;
                v.push((l as u32, h as u32, coverage.restrict_matrix(pooled.view())));
            }
        }
        v
    } else {
        Vec::new()
    };

    let im: Option<InteractionMatrix> = if cfg.needs_im() {
        Some(build_interaction_matrix(dump.attention()?, &align, cfg.pooling)?)
    } else {
        None
    };

    for (set, b) in visible {
        let k = cfg.k.resolve(b.len(), coverage.len());

        for (tool, scores) in &attributions {
            let m = top_k_tokens(scores, k)?;
            out.records.push(AlignmentRecord {
                tool: Some((*tool).clone()),
                ..record(id, set, MetricKind::Interpret, k, iou(&m, &b)?)
            });
        }
        for (l, h, att) in &heads {
            if cfg.wants(MetricKind::Attention) {
                let m = top_k_incident_tokens(att.view(), k)?;
                out.records.push(AlignmentRecord {
                    layer: Some(*l),
                    head: Some(*h),
                    ..record(id, set, MetricKind::Attention, k, iou(&m, &b)?)
                });
            }
            if cfg.wants(MetricKind::PairProportion) {
                match pair_proportion(att.view(), &b, cfg.theta) {
                    Ok(p) => out.records.push(AlignmentRecord {
                        layer: Some(*l),
                        head: Some(*h),
                        ..record(id, set, MetricKind::PairProportion, k, p)
                    }),
                    Err(Error::NoHighAttention(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let Some(im) = &im else { continue };
        if cfg.wants(MetricKind::Interaction) {
            let m = top_k_incident_tokens(im.matrix(), k)?;
            out.records.push(record(id, set, MetricKind::Interaction, k, iou(&m, &b)?));
        }

        if set.kind != FeatureKind::BuggyPath {
            continue;
        }
        let path = covered_path(set, &coverage);
        if path.len() < 2 {
            out.short_paths += 1;
            continue;
        }
        let n = path.len();
        let t = cfg.top_t.unwrap_or_else(|| default_top_t(im.len(), n));
        let path_record = |metric, score| AlignmentRecord {
            path_len: Some(n as u32),
            ..record(id, set, metric, t, score)
        };
        if cfg.wants(MetricKind::JointProb) {
            out.records.push(AlignmentRecord {
                k: 0,
                ..path_record(MetricKind::JointProb, path_joint_probability(im, &path)?)
            });
        }
        if cfg.wants(MetricKind::Chain) || cfg.wants(MetricKind::Coverage) {
            let c = longest_chain(im, &path, t)?;
            if cfg.wants(MetricKind::Chain) {
                out.records.push(path_record(MetricKind::Chain, c.chain_length as f64));
            }
            if cfg.wants(MetricKind::Coverage) {
                out.records.push(path_record(MetricKind::Coverage, c.edge_coverage));
            }
        }
        if cfg.wants(MetricKind::Components) {
            out.records.push(path_record(MetricKind::Components, induced_components(im, &path, t)? as f64));
        }
    }
    Ok(out)
}
