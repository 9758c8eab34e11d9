//! Small hand-built and randomly generated models for tests, demos and benchmarks.

use rand::Rng;

use crate::model::{
    DecisionTree, EnsembleStrategy, NodeId, NodeKind, TreeEnsemble, TreeNode, VerticalPartition,
};

fn split(id: NodeId, feature: usize, threshold: f64, left: NodeId, right: NodeId) -> TreeNode {
    TreeNode {
        id,
        kind: NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        },
    }
}

fn leaf(id: NodeId, leaf_index: usize, weight: f64) -> TreeNode {
    TreeNode {
        id,
        kind: NodeKind::Leaf { leaf_index, weight },
    }
}

/// Leaf weights of [`worked_example_tree`], by leaf index.
pub const WORKED_EXAMPLE_WEIGHTS: [f64; 6] = [0.11, -0.27, 0.35, -0.42, 0.58, -0.63];

/// Six-leaf tree over five features where features 0 and 1 belong to the
/// guest and 2, 3, 4 to a single host:
///
/// ```text
/// n0 f0 (guest)
/// ├── n1 f2 (host)        -> leaf 0 | leaf 1
/// └── n4 f3 (host)
///     ├── n5 f4 (host)    -> leaf 2 | leaf 3
///     └── n8 f1 (guest)   -> leaf 4 | leaf 5
/// ```
pub fn worked_example_tree() -> DecisionTree {
    let w = WORKED_EXAMPLE_WEIGHTS;
    let nodes = vec![
        split(0, 0, 0.5, 1, 4),
        split(1, 2, 0.5, 2, 3),
        leaf(2, 0, w[0]),
        leaf(3, 1, w[1]),
        split(4, 3, 0.5, 5, 8),
        split(5, 4, 0.5, 6, 7),
        leaf(6, 2, w[2]),
        leaf(7, 3, w[3]),
        split(8, 1, 0.5, 9, 10),
        leaf(9, 4, w[4]),
        leaf(10, 5, w[5]),
    ];
    DecisionTree::new(0, nodes, 0).expect("worked example is well formed")
}

pub fn worked_example_ensemble() -> TreeEnsemble {
    let names = (1..=5).map(|i| format!("feature_{i}")).collect();
    TreeEnsemble::with_global_shrinkage(vec![worked_example_tree()], EnsembleStrategy::GbdtSigmoid, 1.0, 0.0, names)
        .expect("valid ensemble")
}

pub fn worked_example_partition() -> VerticalPartition {
    VerticalPartition::new(2, vec![0, 0, 1, 1, 1]).expect("valid partition")
}

/// A sample for which the guest's candidates are leaves {0, 1}, the host's
/// are {1, 4, 5}, and the true leaf is 1.
pub fn worked_example_sample() -> Vec<f64> {
    vec![0.2, 0.1, 0.9, 0.7, 0.3]
}

/// Random binary tree with thresholds and feature values meant to be drawn
/// from [0, 1). Each node below `max_depth` splits with probability
/// `split_prob` (the root always splits when `max_depth > 0`).
pub fn random_tree<R: Rng + ?Sized>(
    rng: &mut R,
    tree_id: usize,
    max_depth: usize,
    features: usize,
    split_prob: f64,
) -> DecisionTree {
    fn grow<R: Rng + ?Sized>(
        rng: &mut R,
        nodes: &mut Vec<TreeNode>,
        leaves: &mut usize,
        depth: usize,
        max_depth: usize,
        features: usize,
        split_prob: f64,
    ) -> NodeId {
        let id = nodes.len();
        let splits = depth < max_depth && (depth == 0 || rng.gen_bool(split_prob));
        if !splits {
            nodes.push(leaf(id, *leaves, rng.gen_range(-1.0..1.0)));
            *leaves += 1;
            return id;
        }
        nodes.push(leaf(id, usize::MAX, 0.0)); // placeholder
        let feature = rng.gen_range(0..features);
        let threshold = rng.gen_range(0.05..0.95);
        let left = grow(rng, nodes, leaves, depth + 1, max_depth, features, split_prob);
        let right = grow(rng, nodes, leaves, depth + 1, max_depth, features, split_prob);
        nodes[id] = split(id, feature, threshold, left, right);
        id
    }

    let mut nodes = Vec::new();
    let mut leaves = 0;
    grow(rng, &mut nodes, &mut leaves, 0, max_depth, features, split_prob);
    DecisionTree::new(tree_id, nodes, 0).expect("generated trees are well formed")
}

pub fn random_ensemble<R: Rng + ?Sized>(rng: &mut R, trees: usize, max_depth: usize, features: usize) -> TreeEnsemble {
    let ts = (0..trees)
        .map(|k| random_tree(rng, k, max_depth, features, 0.8))
        .collect();
    let names = (0..features).map(|f| format!("x{f}")).collect();
    TreeEnsemble::with_global_shrinkage(ts, EnsembleStrategy::GbdtSigmoid, 0.1, 0.0, names).expect("valid ensemble")
}

/// `trees` stumps on feature 0 with leaf weights `weight` (left) and `-weight` (right).
pub fn constant_ensemble(trees: usize, weight: f64) -> TreeEnsemble {
    let ts = (0..trees)
        .map(|k| DecisionTree::new(k, vec![split(0, 0, 0.5, 1, 2), leaf(1, 0, weight), leaf(2, 1, -weight)], 0).unwrap())
        .collect();
    TreeEnsemble::with_global_shrinkage(ts, EnsembleStrategy::GbdtSigmoid, 1.0, 0.0, vec!["x0".into()]).unwrap()
}

/// Uniform sample in [0, 1)^features.
pub fn random_sample<R: Rng + ?Sized>(rng: &mut R, features: usize) -> Vec<f64> {
    (0..features).map(|_| rng.gen::<f64>()).collect()
}
