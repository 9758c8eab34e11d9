//! Plaintext second-order gradient boosting for binary log loss.
//!
//! Exact greedy split search over midpoints of consecutive distinct values.
//! Produces ordinary [`TreeEnsemble`]s for the inference side; nothing here is
//! encrypted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::Dataset;
use crate::model::{DecisionTree, EnsembleStrategy, ModelError, NodeId, NodeKind, TreeEnsemble, TreeNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("label at row {index} is not 0 or 1")]
    NonBinaryLabel { index: usize },
    #[error("margin at row {index} is not finite")]
    NonFiniteMargin { index: usize },
    #[error("{labels} labels but {margins} margins")]
    LengthMismatch { labels: usize, margins: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("split statistics need a nonempty sample set")]
    EmptyNode,
    #[error("left and right sets do not partition the parent set")]
    NotAPartition,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-sample first and second derivatives of the loss at the current margin.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHess {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl GradHess {
    fn sums(&self, indices: &[usize]) -> (f64, f64) {
        indices
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub shrinkage: f64,
    pub min_child_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trees: 100,
            max_depth: 4,
            lambda: 1.0,
            gamma: 0.0,
            shrinkage: 0.1,
            min_child_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.trees == 0 {
            return bad("trees must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.shrinkage > 0.0 && self.shrinkage.is_finite()) {
            return bad("shrinkage must be finite and > 0");
        }
        if self.min_child_samples == 0 {
            return bad("min_child_samples must be at least 1");
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(labels: &[f64], margins: &[f64]) -> Result<(), TrainError> {
    if labels.len() != margins.len() {
        return Err(TrainError::LengthMismatch {
            labels: labels.len(),
            margins: margins.len(),
        });
    }
    if let Some(index) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(TrainError::NonBinaryLabel { index });
    }
    if let Some(index) = margins.iter().position(|m| !m.is_finite()) {
        return Err(TrainError::NonFiniteMargin { index });
    }
    Ok(())
}

/// Mean logistic loss of margins (logits) against 0/1 labels.
pub fn logloss(labels: &[f64], margins: &[f64]) -> Result<f64, TrainError> {
    check_inputs(labels, margins)?;
    let total: f64 = labels
        .iter()
        .zip(margins)
        .map(|(&y, &m)| {
            // log(1 + e^m) - y m, computed without overflow
            let softplus = m.max(0.0) + (-m.abs()).exp().ln_1p();
            softplus - y * m
        })
        .sum();
    Ok(total / labels.len().max(1) as f64)
}

/// g = sigmoid(m) - y, h = sigmoid(m)(1 - sigmoid(m)).
pub fn grad_hess_logloss(labels: &[f64], margins: &[f64]) -> Result<GradHess, TrainError> {
    check_inputs(labels, margins)?;
    let (grad, hess) = labels
        .iter()
        .zip(margins)
        .map(|(&y, &m)| {
            let p = sigmoid(m);
            (p - y, p * (1.0 - p))
        })
        .unzip();
    Ok(GradHess { grad, hess })
}

fn gain_from_sums(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

/// Structure-score improvement of splitting `parent` into `left` and `right`.
pub fn split_gain(
    parent: &[usize],
    left: &[usize],
    right: &[usize],
    gh: &GradHess,
    lambda: f64,
    gamma: f64,
) -> Result<f64, TrainError> {
    if parent.is_empty() {
        return Err(TrainError::EmptyNode);
    }
    if left.len() + right.len() != parent.len() {
        return Err(TrainError::NotAPartition);
    }
    let (gl, hl) = gh.sums(left);
    let (gr, hr) = gh.sums(right);
    Ok(gain_from_sums(gl, hl, gr, hr, lambda, gamma))
}

/// Loss-minimizing leaf value -G / (H + lambda).
pub fn leaf_weight(indices: &[usize], gh: &GradHess, lambda: f64) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyNode);
    }
    let (g, h) = gh.sums(indices);
    if h + lambda <= 0.0 {
        return Ok(0.0);
    }
    let w = -g / (h + lambda);
    // avoid -0.0 so documents stay canonical
    Ok(if w == 0.0 { 0.0 } else { w })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    /// Samples with value < threshold.
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

/// Highest-gain split of `indices`; ties go to the lowest feature, then the
/// lowest threshold. `None` when no split leaves `min_child_samples` on both
/// sides. The returned gain may be <= 0.
pub fn best_split(data: &Dataset, indices: &[usize], gh: &GradHess, config: &TrainConfig) -> Option<SplitCandidate> {
    let min_child = config.min_child_samples.max(1);
    if indices.len() < 2 * min_child {
        return None;
    }
    let (g_total, h_total) = gh.sums(indices);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = indices.to_vec();
    for feature in 0..data.cols() {
        order.sort_by(|&a, &b| data.value(a, feature).total_cmp(&data.value(b, feature)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for cut in 1..order.len() {
            let prev = order[cut - 1];
            gl += gh.grad[prev];
            hl += gh.hess[prev];
            let (lo, hi) = (data.value(prev, feature), data.value(order[cut], feature));
            if lo == hi || cut < min_child || order.len() - cut < min_child {
                continue;
            }
            let gain = gain_from_sums(gl, hl, g_total - gl, h_total - hl, config.lambda, config.gamma);
            if best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((feature, midpoint(lo, hi), gain));
            }
        }
    }
    let (feature, threshold, gain) = best?;
    let (left, right) = indices.iter().partition(|&&i| data.value(i, feature) < threshold);
    Some(SplitCandidate {
        feature,
        threshold,
        gain,
        left,
        right,
    })
}

/// A threshold t with lo < t <= hi, normally the exact midpoint.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub ensemble: TreeEnsemble,
    /// Mean training log loss before the first tree and after each tree.
    pub train_logloss: Vec<f64>,
}

/// Boosts `config.trees` trees on the dataset's labels with base score 0.
pub fn fit_gbdt(data: &Dataset, config: &TrainConfig) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    let labels = data.labels();
    if labels.len() < 2 {
        return Err(TrainError::TooFewSamples(labels.len()));
    }
    let mut margins = vec![0.0; labels.len()];
    check_inputs(labels, &margins)?;
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(TrainError::SingleClass);
    }

    let all: Vec<usize> = (0..labels.len()).collect();
    let mut trees = Vec::with_capacity(config.trees);
    let mut history = vec![logloss(labels, &margins)?];
    for k in 0..config.trees {
        let gh = grad_hess_logloss(labels, &margins)?;
        let mut builder = TreeBuilder {
            data,
            gh: &gh,
            config,
            nodes: Vec::new(),
            leaves: 0,
        };
        builder.grow(&all, 0, &mut margins)?;
        trees.push(DecisionTree::new(k, builder.nodes, 0)?);
        history.push(logloss(labels, &margins)?);
        log::debug!("tree {k}: train logloss {:.6}", history[k + 1]);
    }
    let ensemble = TreeEnsemble::with_global_shrinkage(
        trees,
        EnsembleStrategy::GbdtSigmoid,
        config.shrinkage,
        0.0,
        data.feature_names().to_vec(),
    )?;
    Ok(TrainedModel {
        ensemble,
        train_logloss: history,
    })
}

struct TreeBuilder<'a> {
    data: &'a Dataset,
    gh: &'a GradHess,
    config: &'a TrainConfig,
    nodes: Vec<TreeNode>,
    leaves: usize,
}

impl TreeBuilder<'_> {
    /// Pre-order construction so leaf indices come out left to right.
    fn grow(&mut self, indices: &[usize], depth: usize, margins: &mut [f64]) -> Result<NodeId, TrainError> {
        let id = self.nodes.len();
        let split = if depth < self.config.max_depth {
            best_split(self.data, indices, self.gh, self.config).filter(|s| s.gain > 0.0)
        } else {
            None
        };
        let Some(split) = split else {
            let weight = leaf_weight(indices, self.gh, self.config.lambda)?;
            for &i in indices {
                margins[i] += self.config.shrinkage * weight;
            }
            self.nodes.push(TreeNode {
                id,
                kind: NodeKind::Leaf {
                    leaf_index: self.leaves,
                    weight,
                },
            });
            self.leaves += 1;
            return Ok(id);
        };
        self.nodes.push(TreeNode {
            id,
            kind: NodeKind::Leaf {
                leaf_index: usize::MAX,
                weight: 0.0,
            },
        });
        let left = self.grow(&split.left, depth + 1, margins)?;
        let right = self.grow(&split.right, depth + 1, margins)?;
        self.nodes[id].kind = NodeKind::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::SyntheticCredit;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Dataset {
        let d = rows[0].len();
        let names = (0..d).map(|f| format!("x{f}")).collect();
        Dataset::new(names, rows.concat(), labels, None).unwrap()
    }

    #[test]
    fn grad_hess_at_zero_margin() {
        let gh = grad_hess_logloss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(gh.grad, vec![-0.5, 0.5]);
        assert_eq!(gh.hess, vec![0.25, 0.25]);
        assert_eq!(
            grad_hess_logloss(&[2.0], &[0.0]).unwrap_err(),
            TrainError::NonBinaryLabel { index: 0 }
        );
    }

    #[test]
    fn grad_hess_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-4;
        for _ in 0..1000 {
            let y = rng.gen_range(0..2) as f64;
            let m: f64 = rng.gen_range(-8.0..8.0);
            let loss = |m: f64| logloss(&[y], &[m]).unwrap();
            let g_fd = (loss(m + eps) - loss(m - eps)) / (2.0 * eps);
            let h_fd = (loss(m + eps) - 2.0 * loss(m) + loss(m - eps)) / (eps * eps);
            let gh = grad_hess_logloss(&[y], &[m]).unwrap();
            assert!((gh.grad[0] - g_fd).abs() < 1e-6, "g {m} {y}");
            assert!((gh.hess[0] - h_fd).abs() < 1e-6, "h {m} {y}");
            assert!(gh.grad[0] > -1.0 && gh.grad[0] < 1.0);
            assert!(gh.hess[0] > 0.0 && gh.hess[0] <= 0.25);
        }
    }

    #[test]
    fn split_gain_hand_values() {
        let gh = GradHess {
            grad: vec![1.0, -1.0],
            hess: vec![1.0, 1.0],
        };
        assert_eq!(split_gain(&[0, 1], &[0], &[1], &gh, 0.0, 0.0).unwrap(), 1.0);
        let same = GradHess {
            grad: vec![0.3; 4],
            hess: vec![0.2; 4],
        };
        // identical halves add nothing beyond the penalty (lambda = 0)
        let g = split_gain(&[0, 1, 2, 3], &[0, 1], &[2, 3], &same, 0.0, 0.7).unwrap();
        assert!((g + 0.7).abs() < 1e-12);
        let g = split_gain(&[0, 1, 2, 3], &[0, 1], &[2, 3], &same, 1.0, 0.0).unwrap();
        let whole = 1.2 * 1.2 / 1.8;
        let half = 0.6 * 0.6 / 1.4;
        assert!((g - 0.5 * (2.0 * half - whole)).abs() < 1e-12);
        assert!(split_gain(&[], &[], &[], &same, 1.0, 0.0).is_err());
        assert!(split_gain(&[0, 1], &[0], &[], &same, 1.0, 0.0).is_err());
    }

    #[test]
    fn leaf_weight_values() {
        let gh = GradHess {
            grad: vec![1.0, 1.0, 0.0],
            hess: vec![1.0, 1.0, 0.5],
        };
        assert_eq!(leaf_weight(&[0, 1], &gh, 0.0).unwrap(), -1.0);
        assert_eq!(leaf_weight(&[2], &gh, 1.0).unwrap(), 0.0);
        assert!(leaf_weight(&[], &gh, 1.0).is_err());
    }

    #[test]
    fn leaf_weight_minimizes_second_order_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let gh = GradHess {
                grad: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                hess: (0..n).map(|_| rng.gen_range(0.01..0.25)).collect(),
            };
            let idx: Vec<usize> = (0..n).collect();
            let lambda = rng.gen_range(0.0..2.0);
            let w = leaf_weight(&idx, &gh, lambda).unwrap();
            let (g, h) = gh.sums(&idx);
            let obj = |w: f64| g * w + 0.5 * (h + lambda) * w * w;
            for eps in [1e-3, -1e-3, 0.1, -0.1] {
                assert!(obj(w) <= obj(w + eps));
            }
        }
    }

    /// Every (feature, midpoint) pair scored from scratch with split_gain.
    fn brute_force_best(data: &Dataset, idx: &[usize], gh: &GradHess, config: &TrainConfig) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for f in 0..data.cols() {
            let mut vals: Vec<f64> = idx.iter().map(|&i| data.value(i, f)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let l: Vec<usize> = idx.iter().copied().filter(|&i| data.value(i, f) < t).collect();
                let r: Vec<usize> = idx.iter().copied().filter(|&i| data.value(i, f) >= t).collect();
                if l.len() < config.min_child_samples || r.len() < config.min_child_samples {
                    continue;
                }
                let g = split_gain(idx, &l, &r, gh, config.lambda, config.gamma).unwrap();
                if best.is_none_or(|b| g > b.2) {
                    best = Some((f, t, g));
                }
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        // dyadic statistics keep every partial sum exact, so the incremental
        // scan and the from-scratch oracle must agree bit for bit
        #[test]
        fn best_split_equals_enumeration(
            n in 2usize..=64,
            d in 1usize..=4,
            seed in any::<u64>(),
            lambda in prop::sample::select(vec![0.0, 0.5, 1.0, 2.0]),
            gamma in prop::sample::select(vec![0.0, 0.25]),
            min_child in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect()).collect();
            let labels = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let data = dataset(rows, labels);
            let gh = GradHess {
                grad: (0..n).map(|_| rng.gen_range(-4..=4) as f64 / 4.0).collect(),
                hess: (0..n).map(|_| rng.gen_range(1..=4) as f64 / 16.0).collect(),
            };
            let config = TrainConfig { lambda, gamma, min_child_samples: min_child, ..TrainConfig::default() };
            let idx: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.8)).collect();
            let ours = best_split(&data, &idx, &gh, &config);
            let oracle = brute_force_best(&data, &idx, &gh, &config);
            prop_assert_eq!(ours.as_ref().map(|s| (s.feature, s.threshold, s.gain)), oracle);
            if let Some(s) = ours {
                prop_assert_eq!(s.left.len() + s.right.len(), idx.len());
                prop_assert!(s.left.iter().all(|&i| data.value(i, s.feature) < s.threshold));
                prop_assert!(s.right.iter().all(|&i| data.value(i, s.feature) >= s.threshold));
            }
        }
    }

    #[test]
    fn separable_feature_gives_one_stump() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let y = (i % 2) as f64;
            rows.push(vec![rng.gen::<f64>(), y * 2.0 + rng.gen::<f64>(), rng.gen::<f64>()]);
            labels.push(y);
        }
        let config = TrainConfig {
            trees: 1,
            max_depth: 1,
            ..TrainConfig::default()
        };
        let model = fit_gbdt(&dataset(rows, labels), &config).unwrap();
        let tree = &model.ensemble.trees()[0];
        assert_eq!(tree.leaf_count(), 2);
        match tree.node(tree.root()).kind {
            NodeKind::Split { feature, threshold, .. } => {
                assert_eq!(feature, 1);
                assert!(threshold > 1.0 && threshold < 2.0);
            }
            _ => panic!("expected a split"),
        }
        let w = tree.leaf_weights();
        assert!(w[0] < 0.0 && w[1] > 0.0);
    }

    #[test]
    fn xor_pattern_is_learned_at_depth_two() {
        // uneven quadrant counts: a perfectly balanced XOR has zero gain at
        // the root for any greedy learner
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (a, b, count) in [(0.0, 0.0, 30), (0.0, 1.0, 10), (1.0, 0.0, 20), (1.0, 1.0, 10)] {
            for _ in 0..count {
                rows.push(vec![a + rng.gen_range(-0.2..0.2), b + rng.gen_range(-0.2..0.2)]);
                labels.push(if a != b { 1.0 } else { 0.0 });
            }
        }
        let data = dataset(rows, labels);
        let config = TrainConfig {
            trees: 1,
            max_depth: 2,
            shrinkage: 1.0,
            ..TrainConfig::default()
        };
        let model = fit_gbdt(&data, &config).unwrap();
        let tree = &model.ensemble.trees()[0];
        let correct = (0..data.rows())
            .filter(|&i| {
                let (_, w) = tree.predict_leaf(|f| Some(data.value(i, f))).unwrap();
                (w > 0.0) == (data.labels()[i] == 1.0)
            })
            .count();
        assert_eq!(correct, data.rows());
    }

    #[test]
    fn training_loss_never_increases() {
        let data = SyntheticCredit::new(11, 10).generate(1500);
        let config = TrainConfig {
            trees: 30,
            ..TrainConfig::default()
        };
        let model = fit_gbdt(&data, &config).unwrap();
        assert_eq!(model.train_logloss.len(), 31);
        for w in model.train_logloss.windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
        assert!(model.ensemble.depth() <= 4);
    }

    #[test]
    fn fitting_is_deterministic() {
        let data = SyntheticCredit::new(3, 12).generate(400);
        let config = TrainConfig {
            trees: 5,
            ..TrainConfig::default()
        };
        assert_eq!(fit_gbdt(&data, &config).unwrap(), fit_gbdt(&data, &config).unwrap());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let one_class = dataset(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]);
        assert_eq!(
            fit_gbdt(&one_class, &TrainConfig::default()).unwrap_err(),
            TrainError::SingleClass
        );
        let single = dataset(vec![vec![0.0]], vec![1.0]);
        assert_eq!(
            fit_gbdt(&single, &TrainConfig::default()).unwrap_err(),
            TrainError::TooFewSamples(1)
        );
        let ok = dataset(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]);
        let zero_trees = TrainConfig {
            trees: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(fit_gbdt(&ok, &zero_trees), Err(TrainError::InvalidConfig(_))));
    }
}
