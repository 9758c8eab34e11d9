//! Tree-ensemble data model.
//!
//! Node ids are dense indices into a tree's node vector. A sample goes to the
//! left child iff `x[feature] < threshold`. Leaf indices number the leaves
//! 0..T-1 and are shared by every party.

mod document;
mod partition;

use std::fmt;

use num_bigint::BigUint;
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ahe::FixedPointCodec;

pub use document::{
    load_model, load_model_file, model_version, save_model, save_model_file, ModelDocument, SCHEMA_VERSION,
};
pub use partition::{partition_model, PartyId, PartyRole, SubModel, TreeView, VerticalPartition, ViewNode, GUEST};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("ensemble has no trees")]
    Empty,
    #[error("tree {tree}: node {node}: {reason}")]
    Node { tree: usize, node: NodeId, reason: String },
    #[error("tree {tree}: {reason}")]
    Tree { tree: usize, reason: String },
    #[error("tree {tree}: shrinkage must be positive and finite, got {value}")]
    Shrinkage { tree: usize, value: f64 },
    #[error("partition: {0}")]
    Partition(String),
    #[error("feature {feature} has no owner in the partition")]
    UnownedFeature { feature: usize },
    #[error("host view for party {party} carries leaf weights")]
    WeightInHostView { party: PartyId },
    #[error("document field `{field}`: {reason}")]
    Document { field: String, reason: String },
    #[error(
        "aggregated encodings may wrap: {trees} trees x max |alpha*w| {max_abs} x 2^{scale_bits} = {bound} is not below n/2"
    )]
    OverflowRisk {
        trees: usize,
        max_abs: f64,
        scale_bits: u32,
        bound: String,
    },
    #[error("missing value for feature {feature}")]
    MissingFeature { feature: usize },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Split {
        feature: usize,
        threshold: f64,
        left: NodeId,
        right: NodeId,
    },
    Leaf {
        leaf_index: usize,
        weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    root: NodeId,
    leaf_count: usize,
    depth: usize,
}

impl DecisionTree {
    /// Validates structure and derives leaf count and depth. `tree` is only used
    /// in error messages.
    pub fn new(tree: usize, nodes: Vec<TreeNode>, root: NodeId) -> Result<Self, ModelError> {
        let node_err = |node: NodeId, reason: &str| ModelError::Node {
            tree,
            node,
            reason: reason.to_string(),
        };
        if nodes.is_empty() {
            return Err(ModelError::Tree {
                tree,
                reason: "no nodes".into(),
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(node_err(n.id, "node ids must equal their position"));
            }
        }
        if root >= nodes.len() {
            return Err(ModelError::Tree {
                tree,
                reason: format!("root {root} does not exist"),
            });
        }

        let mut parent_seen = vec![false; nodes.len()];
        let mut leaf_seen: Vec<bool> = Vec::new();
        let mut leaf_count = 0;
        let mut depth = 0;
        let mut stack = vec![(root, 0usize)];
        parent_seen[root] = true;
        while let Some((id, d)) = stack.pop() {
            match &nodes[id].kind {
                NodeKind::Split {
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if !threshold.is_finite() {
                        return Err(node_err(id, "threshold is not finite"));
                    }
                    for &child in [right, left] {
                        if child >= nodes.len() {
                            return Err(node_err(id, &format!("child {child} does not exist")));
                        }
                        if parent_seen[child] {
                            return Err(node_err(child, "node is referenced twice or forms a cycle"));
                        }
                        parent_seen[child] = true;
                        stack.push((child, d + 1));
                    }
                }
                NodeKind::Leaf { leaf_index, weight } => {
                    if !weight.is_finite() {
                        return Err(node_err(id, "leaf weight is not finite"));
                    }
                    if *leaf_index >= leaf_seen.len() {
                        leaf_seen.resize(leaf_index + 1, false);
                    }
                    if leaf_seen[*leaf_index] {
                        return Err(node_err(id, &format!("leaf index {leaf_index} used twice")));
                    }
                    leaf_seen[*leaf_index] = true;
                    leaf_count += 1;
                    depth = depth.max(d);
                }
            }
        }
        if let Some(orphan) = parent_seen.iter().position(|&s| !s) {
            return Err(node_err(orphan, "node is not reachable from the root"));
        }
        if leaf_seen.len() != leaf_count {
            return Err(ModelError::Tree {
                tree,
                reason: format!("leaf indices are not exactly 0..{leaf_count}"),
            });
        }
        Ok(DecisionTree {
            nodes,
            root,
            leaf_count,
            depth,
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// T_k
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| !n.is_leaf())
    }

    /// Leaf weights ordered by leaf index.
    pub fn leaf_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.leaf_count];
        for n in &self.nodes {
            if let NodeKind::Leaf { leaf_index, weight } = n.kind {
                w[leaf_index] = weight;
            }
        }
        w
    }

    /// Features referenced by split nodes.
    pub fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n.kind {
            NodeKind::Split { feature, .. } => Some(feature),
            NodeKind::Leaf { .. } => None,
        })
    }

    /// Root-to-leaf traversal; returns the node ids visited, ending at the leaf.
    pub fn path<F>(&self, mut value: F) -> Result<Vec<NodeId>, ModelError>
    where
        F: FnMut(usize) -> Option<f64>,
    {
        let mut id = self.root;
        let mut path = vec![id];
        while let NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[id].kind
        {
            let x = value(feature).ok_or(ModelError::MissingFeature { feature })?;
            id = if x < threshold { left } else { right };
            path.push(id);
        }
        Ok(path)
    }

    /// Leaf index and weight reached by plaintext traversal.
    pub fn predict_leaf<F>(&self, value: F) -> Result<(usize, f64), ModelError>
    where
        F: FnMut(usize) -> Option<f64>,
    {
        let path = self.path(value)?;
        match self.nodes[*path.last().unwrap()].kind {
            NodeKind::Leaf { leaf_index, weight } => Ok((leaf_index, weight)),
            NodeKind::Split { .. } => unreachable!("paths end at leaves"),
        }
    }
}

/// How per-tree outputs are combined into a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleStrategy {
    /// sigmoid(base_score + sum_k alpha_k f_k(x))
    GbdtSigmoid,
    /// (1/K) sum_k alpha_k f_k(x)
    RfAverage,
}

impl fmt::Display for EnsembleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleStrategy::GbdtSigmoid => "gbdt_sigmoid",
            EnsembleStrategy::RfAverage => "rf_average",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble {
    trees: Vec<DecisionTree>,
    strategy: EnsembleStrategy,
    shrinkage: Vec<f64>,
    base_score: f64,
    feature_names: Vec<String>,
}

impl TreeEnsemble {
    pub fn new(
        trees: Vec<DecisionTree>,
        strategy: EnsembleStrategy,
        shrinkage: Vec<f64>,
        base_score: f64,
        feature_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        if trees.is_empty() {
            return Err(ModelError::Empty);
        }
        if shrinkage.len() != trees.len() {
            return Err(ModelError::Document {
                field: "meta.shrinkage".into(),
                reason: format!("{} values for {} trees", shrinkage.len(), trees.len()),
            });
        }
        for (k, &a) in shrinkage.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                return Err(ModelError::Shrinkage { tree: k, value: a });
            }
        }
        if !base_score.is_finite() {
            return Err(ModelError::Document {
                field: "meta.base_score".into(),
                reason: "not finite".into(),
            });
        }
        let d = feature_names.len();
        for (k, t) in trees.iter().enumerate() {
            for n in t.nodes() {
                if let NodeKind::Split { feature, .. } = n.kind {
                    if feature >= d {
                        return Err(ModelError::Node {
                            tree: k,
                            node: n.id,
                            reason: format!("feature {feature} out of range for {d} columns"),
                        });
                    }
                }
            }
        }
        Ok(TreeEnsemble {
            trees,
            strategy,
            shrinkage,
            base_score,
            feature_names,
        })
    }

    /// Same shrinkage for every tree.
    pub fn with_global_shrinkage(
        trees: Vec<DecisionTree>,
        strategy: EnsembleStrategy,
        shrinkage: f64,
        base_score: f64,
        feature_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        let alphas = vec![shrinkage; trees.len()];
        Self::new(trees, strategy, alphas, base_score, feature_names)
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn strategy(&self) -> EnsembleStrategy {
        self.strategy
    }

    pub fn shrinkage(&self) -> &[f64] {
        &self.shrinkage
    }

    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    /// Maximum depth across trees.
    pub fn depth(&self) -> usize {
        self.trees.iter().map(|t| t.depth()).max().unwrap_or(0)
    }

    /// Leaf values with shrinkage applied, `alpha_k * w_(j,k)`, per tree.
    pub fn scaled_leaf_weights(&self, tree: usize) -> Vec<f64> {
        let a = self.shrinkage[tree];
        self.trees[tree].leaf_weights().into_iter().map(|w| a * w).collect()
    }

    /// Number of split nodes per feature; the interpretable importance report.
    pub fn split_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.feature_count()];
        for t in &self.trees {
            for f in t.features() {
                counts[f] += 1;
            }
        }
        counts
    }
}

/// Checks that summing K encoded leaf values can never wrap modulo n:
/// `K * max |alpha_k w_(j,k)| * scale < n / 2`.
pub fn validate_overflow(ensemble: &TreeEnsemble, codec: &FixedPointCodec) -> Result<(), ModelError> {
    let max_abs = (0..ensemble.tree_count())
        .flat_map(|k| ensemble.scaled_leaf_weights(k))
        .fold(0.0f64, |m, w| m.max(w.abs()));
    let trees = ensemble.tree_count();
    let bound = (max_abs * trees as f64 * codec.scale()).ceil();
    let fits = BigUint::from_f64(bound)
        .map(|b| b < *codec.half_modulus())
        .unwrap_or(false);
    if fits {
        Ok(())
    } else {
        Err(ModelError::OverflowRisk {
            trees,
            max_abs,
            scale_bits: codec.scale_bits(),
            bound: format!("{bound:e}"),
        })
    }
}
