//! Interaction matrix: where the model's attention is likely to move next,
//! and path-oriented alignment measured against it.
//!
//! Construction: each layer's attention is averaged over heads, consecutive
//! layers are composed (`A_l * A_{l+1}`, a two-step move through any
//! intermediate position) and summed over layers, the sum is pooled to AST
//! tokens and rows are normalized. No causal mask is applied, so
//! bidirectional encoders are handled as-is.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array2, ArrayView2};

use crate::align::{aggregate_attention, AttentionPooling, Coverage, TokenAlignment};
use crate::dump::{AttentionTensor, STOCHASTIC_TOLERANCE};
use crate::error::{Error, Result};
use crate::metrics::{iou, top_cells, top_k_incident_tokens, AlignmentRecord, MetricKind};
use crate::summary::Stats;
use crate::TokenSet;

/// Row-stochastic transition matrix over the covered AST tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    probs: Array2<f64>,
    coverage: Coverage,
}

/// Divides each row by its sum; rows with no mass become uniform.
pub fn normalize_rows(m: &mut Array2<f64>) {
    let n = m.ncols();
    for mut row in m.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 && sum.is_finite() {
            row /= sum;
        } else {
            row.fill(1.0 / n as f64);
        }
    }
}

impl InteractionMatrix {
    /// Wraps an AST-level matrix in which every token is covered. Negative
    /// entries are clamped to zero before rows are normalized.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let (rows, cols) = weights.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        Self::from_weights_covering(weights, Coverage::full(rows))
    }

    fn from_weights_covering(mut probs: Array2<f64>, coverage: Coverage) -> Result<Self> {
        if coverage.is_empty() {
            return Err(Error::NoCoveredTokens);
        }
        probs.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        normalize_rows(&mut probs);
        Ok(InteractionMatrix { probs, coverage })
    }

    /// Number of (covered) tokens m.
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Matrix over covered tokens in compact indexing.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn coverage(&self) -> &Coverage {
        &self.coverage
    }

    /// Transition probability between two AST tokens; zero if either is uncovered.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        match (self.coverage.compact(from), self.coverage.compact(to)) {
            (Some(r), Some(c)) => self.probs[[r, c]],
            _ => 0.0,
        }
    }

    /// The `t` most likely transitions as AST-index pairs.
    pub fn top_edges(&self, t: usize) -> HashSet<(usize, usize)> {
        top_cells(self.probs.view(), t)
            .into_iter()
            .map(|(r, c)| (self.coverage.ast_index(r), self.coverage.ast_index(c)))
            .collect()
    }
}

/// `sum_l A_l * A_{l+1}` over head-averaged layers, at input-token level.
pub fn compose_layers(tensor: &AttentionTensor) -> Result<Array2<f64>> {
    let layers = tensor.layers();
    if layers < 2 {
        return Err(Error::TooFewLayers(layers));
    }
    let n = tensor.len();
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut prev = tensor.layer_mean(0);
    for l in 1..layers {
        let next = tensor.layer_mean(l);
        sum += &prev.dot(&next);
        prev = next;
    }
    Ok(sum)
}

pub fn build_interaction_matrix(
    tensor: &AttentionTensor,
    align: &TokenAlignment,
    pooling: AttentionPooling,
) -> Result<InteractionMatrix> {
    let composed = compose_layers(tensor)?;
    let dev = tensor.max_row_deviation();
    if dev > STOCHASTIC_TOLERANCE {
        log::warn!("attention rows are not stochastic (max deviation {dev:.3e})");
    }
    let pooled = aggregate_attention(composed.view(), align, pooling)?;
    let coverage = align.coverage();
    let local = coverage.restrict_matrix(pooled.view());
    InteractionMatrix::from_weights_covering(local, coverage)
}

/// IoU of the top-|B| IM-incident tokens with B (restricted to covered tokens).
pub fn alignment_im(im: &InteractionMatrix, b: &TokenSet) -> Result<(usize, f64)> {
    let b_local = im.coverage.to_compact_set(b);
    if b_local.is_empty() {
        return Err(Error::EmptyBugSet);
    }
    let m = top_k_incident_tokens(im.matrix(), b_local.len())?;
    Ok((b_local.len(), iou(&m, &b_local)?))
}

/// Drops consecutive repeats; fails if fewer than two nodes remain.
fn collapse(path: &[usize]) -> Result<Vec<usize>> {
    let mut nodes = path.to_vec();
    nodes.dedup();
    if nodes.len() < 2 {
        return Err(Error::PathTooShort(nodes.len()));
    }
    Ok(nodes)
}

/// Product of the IM probabilities along consecutive path edges.
pub fn path_joint_probability(im: &InteractionMatrix, path: &[usize]) -> Result<f64> {
    let nodes = collapse(path)?;
    Ok(nodes.windows(2).map(|e| im.prob(e[0], e[1])).product())
}

/// Default top-t for the induction measures.
pub fn default_top_t(m: usize, path_len: usize) -> usize {
    m.max(2 * path_len)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainAlignment {
    /// Longest run of consecutive path edges all among the top-t cells.
    pub chain_length: usize,
    /// Fraction of path edges among the top-t cells.
    pub edge_coverage: f64,
}

pub fn longest_chain(im: &InteractionMatrix, path: &[usize], t: usize) -> Result<ChainAlignment> {
    if t == 0 {
        return Err(Error::InvalidTopT);
    }
    let nodes = collapse(path)?;
    let edges = im.top_edges(t);
    let mut best = 0;
    let mut run = 0;
    let mut hits = 0;
    for e in nodes.windows(2) {
        if edges.contains(&(e[0], e[1])) {
            run += 1;
            hits += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    Ok(ChainAlignment {
        chain_length: best,
        edge_coverage: hits as f64 / (nodes.len() - 1) as f64,
    })
}

/// Connected components of the path's nodes under the top-t cells, treated
/// as undirected edges. Lower means better aligned.
pub fn induced_components(im: &InteractionMatrix, path: &[usize], t: usize) -> Result<usize> {
    if t == 0 {
        return Err(Error::InvalidTopT);
    }
    let nodes: BTreeSet<usize> = collapse(path)?.into_iter().collect();
    let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = nodes.len();
    for (a, b) in im.top_edges(t) {
        if let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                components -= 1;
            }
        }
    }
    Ok(components)
}

/// Joint-probability records grouped by path node count.
pub fn bucket_by_path_length(records: &[AlignmentRecord]) -> Vec<(u32, Stats)> {
    let mut buckets: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (MetricKind::JointProb, Some(len)) = (r.metric, r.path_len) {
            buckets.entry(len).or_default().push(r.score);
        }
    }
    buckets
        .into_iter()
        .filter_map(|(len, v)| Stats::from_values(&v).map(|s| (len, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};
    use proptest::prelude::*;

    fn uniform(m: usize) -> InteractionMatrix {
        InteractionMatrix::from_weights(Array2::from_elem((m, m), 1.0)).unwrap()
    }

    fn tensor_of(layers: &[Array2<f32>]) -> AttentionTensor {
        let n = layers[0].nrows();
        AttentionTensor::new(Array4::from_shape_fn((layers.len(), 1, n, n), |(l, _, r, c)| layers[l][[r, c]])).unwrap()
    }

    #[test]
    fn identity_layers_give_self_transitions() {
        let eye = Array2::<f32>::eye(3);
        let im = build_interaction_matrix(
            &tensor_of(&[eye.clone(), eye.clone(), eye]),
            &TokenAlignment::identity(3),
            AttentionPooling::BlockMean,
        )
        .unwrap();
        assert_eq!(im.matrix(), Array2::<f64>::eye(3));
    }

    #[test]
    fn uniform_layers_give_uniform_rows() {
        let u = Array2::<f32>::from_elem((4, 4), 0.25);
        let align = TokenAlignment::from_map(vec![None, Some(0), Some(0), Some(1)], 2).unwrap();
        let im = build_interaction_matrix(&tensor_of(&[u.clone(), u]), &align, AttentionPooling::BlockMean).unwrap();
        for v in im.matrix() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_product() {
        let a1 = array![[1.0f32, 0.0], [0.0, 1.0]];
        let a2 = array![[0.0f32, 1.0], [1.0, 0.0]];
        let im = build_interaction_matrix(&tensor_of(&[a1, a2]), &TokenAlignment::identity(2), AttentionPooling::BlockMean).unwrap();
        assert_eq!(im.matrix(), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn one_layer_is_too_few() {
        let t = tensor_of(&[Array2::<f32>::eye(2)]);
        assert!(matches!(
            build_interaction_matrix(&t, &TokenAlignment::identity(2), AttentionPooling::BlockMean),
            Err(Error::TooFewLayers(1))
        ));
    }

    #[test]
    fn zero_rows_become_uniform() {
        let im = InteractionMatrix::from_weights(array![[0.0, 0.0], [1.0, 3.0]]).unwrap();
        assert_eq!(im.matrix(), array![[0.5, 0.5], [0.25, 0.75]]);
    }

    #[test]
    fn uncovered_tokens_are_outside_the_matrix() {
        let eye = Array2::<f32>::eye(3);
        let align = TokenAlignment::from_map(vec![Some(0), Some(2), None], 3).unwrap();
        let im = build_interaction_matrix(&tensor_of(&[eye.clone(), eye]), &align, AttentionPooling::BlockMean).unwrap();
        assert_eq!(im.len(), 2);
        assert_eq!(im.prob(2, 2), 1.0);
        assert_eq!(im.prob(1, 1), 0.0);
    }

    #[test]
    fn alignment_im_examples() {
        let mut w = Array2::<f64>::from_elem((5, 5), 0.01);
        w[[0, 4]] = 1.0;
        w[[1, 3]] = 1.0;
        let im = InteractionMatrix::from_weights(w).unwrap();
        assert_eq!(alignment_im(&im, &TokenSet::from([0, 1, 3, 4])).unwrap(), (4, 1.0));

        // uniform: incident tokens are {0, 1} by the tie rule
        assert_eq!(alignment_im(&uniform(4), &TokenSet::from([1, 2])).unwrap().1, 1.0 / 3.0);

        let mut chain = Array2::<f64>::from_elem((3, 3), 0.01);
        chain[[0, 1]] = 1.0;
        chain[[1, 2]] = 1.0;
        let im = InteractionMatrix::from_weights(chain).unwrap();
        assert_eq!(alignment_im(&im, &TokenSet::from([0, 1, 2])).unwrap().1, 1.0);
    }

    #[test]
    fn joint_probability_examples() {
        let im = InteractionMatrix::from_weights(array![[1.0, 3.0], [2.0, 2.0]]).unwrap();
        assert_eq!(path_joint_probability(&im, &[0, 1]).unwrap(), 0.75);
        let u = uniform(5);
        let p = path_joint_probability(&u, &[0, 1, 2, 3]).unwrap();
        assert!((p - 0.2f64.powi(3)).abs() < 1e-15);
        let zero = InteractionMatrix::from_weights(array![[1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(path_joint_probability(&zero, &[2, 0, 1, 2]).unwrap(), 0.0);
        assert!(matches!(path_joint_probability(&u, &[3]), Err(Error::PathTooShort(1))));
        assert!(matches!(path_joint_probability(&u, &[3, 3]), Err(Error::PathTooShort(1))));
        // repeats collapse before edges are formed
        assert_eq!(
            path_joint_probability(&im, &[0, 0, 1]).unwrap(),
            path_joint_probability(&im, &[0, 1]).unwrap()
        );
    }

    /// Row-stochastic 5x5 matrix whose top cells are exactly `edges` (at most
    /// one per row); edge-free rows are uniform.
    fn with_top_edges(edges: &[(usize, usize)]) -> InteractionMatrix {
        let mut w = Array2::<f64>::from_elem((5, 5), 0.2);
        for (i, (r, c)) in edges.iter().enumerate() {
            let v = 0.9 - 0.01 * i as f64;
            w.row_mut(*r).fill((1.0 - v) / 4.0);
            w[[*r, *c]] = v;
        }
        InteractionMatrix::from_weights(w).unwrap()
    }

    #[test]
    fn chain_examples() {
        let path = [0, 1, 2, 3, 4];
        let all = longest_chain(&uniform(5), &path, 25).unwrap();
        assert_eq!((all.chain_length, all.edge_coverage), (4, 1.0));

        let im = with_top_edges(&[(0, 1), (2, 3)]);
        let c = longest_chain(&im, &path, 2).unwrap();
        assert_eq!((c.chain_length, c.edge_coverage), (1, 0.5));

        let none = with_top_edges(&[(4, 0), (3, 1)]);
        let c = longest_chain(&none, &path, 2).unwrap();
        assert_eq!((c.chain_length, c.edge_coverage), (0, 0.0));

        assert!(matches!(longest_chain(&im, &[1], 2), Err(Error::PathTooShort(1))));
        assert!(matches!(longest_chain(&im, &path, 0), Err(Error::InvalidTopT)));
    }

    #[test]
    fn component_examples() {
        let path = [0, 1, 2, 3, 4];
        let full = with_top_edges(&[(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(induced_components(&full, &path, 4).unwrap(), 1);
        let none = with_top_edges(&[]);
        assert_eq!(induced_components(&none, &[0, 2, 4], 1).unwrap(), 3);
        let two = with_top_edges(&[(0, 1), (3, 4)]);
        assert_eq!(induced_components(&two, &path, 2).unwrap(), 3);
    }

    #[test]
    fn buckets() {
        let rec = |len: u32, score: f64| AlignmentRecord {
            path_len: Some(len),
            ..AlignmentRecord::new("e", MetricKind::JointProb, 0, score)
        };
        let b = bucket_by_path_length(&[rec(2, 0.1), rec(2, 0.3), rec(3, 0.05)]);
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].0, b[0].1.count), (2, 2));
        assert!((b[0].1.mean - 0.2).abs() < 1e-15);
        assert_eq!((b[1].0, b[1].1.count, b[1].1.median), (3, 1, 0.05));
        assert_eq!(bucket_by_path_length(&[rec(2, 0.1), rec(2, 0.2)]).len(), 1);
    }

    proptest! {
        #[test]
        fn components_never_grow_with_t(
            weights in proptest::collection::vec(0.0f64..1.0, 36),
            path in proptest::collection::vec(0usize..6, 2..7),
        ) {
            let im = InteractionMatrix::from_weights(Array2::from_shape_vec((6, 6), weights).unwrap()).unwrap();
            prop_assume!(path.windows(2).any(|w| w[0] != w[1]));
            let distinct: BTreeSet<_> = path.iter().collect();
            let mut last = usize::MAX;
            for t in 1..=36 {
                let c = induced_components(&im, &path, t).unwrap();
                prop_assert!(c >= 1 && c <= distinct.len());
                prop_assert!(c <= last);
                last = c;
                let chain = longest_chain(&im, &path, t).unwrap();
                let mut p = path.clone();
                p.dedup();
                let edges = p.len() - 1;
                prop_assert!(chain.chain_length <= edges);
                prop_assert!(chain.edge_coverage + 1e-12 >= chain.chain_length as f64 / edges as f64);
            }
        }
    }
}
