//! Per-party inference primitives.
//!
//! Each party filters a tree's leaves down to those consistent with its own
//! split rules (a candidate set). The guest turns its set into a vector of
//! encrypted, shrinkage-scaled weights with encryptions of zero elsewhere;
//! hosts turn theirs into 0/1 masks. Because split conditions along a tree are
//! mutually exclusive, the candidate sets of all parties meet in exactly the
//! leaf plaintext traversal would reach, so the masked homomorphic sum of the
//! guest vector is the encrypted tree output.

use num_bigint::BigUint;
use thiserror::Error;

use crate::ahe::{AheError, Ciphertext, Encryptor, FixedPointCodec, PublicKey};
use crate::model::{EnsembleStrategy, ModelError, PartyId, TreeEnsemble, TreeView, ViewNode};
use crate::trainer::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ahe(#[from] AheError),
    #[error("tree {tree}: vector length {found}, expected {expected}")]
    LengthMismatch { tree: usize, expected: usize, found: usize },
    #[error("tree {tree}: host vector selects no leaf")]
    EmptyHostVector { tree: usize },
    #[error("nothing to aggregate")]
    NothingToAggregate,
    #[error("tree {tree}: leaf weights are not available to this party")]
    NoWeights { tree: usize },
}

/// Leaves of one tree that a single party cannot rule out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub tree_id: usize,
    pub party: PartyId,
    /// Ascending leaf indices.
    pub leaves: Vec<usize>,
}

impl CandidateSet {
    pub fn contains(&self, leaf: usize) -> bool {
        self.leaves.binary_search(&leaf).is_ok()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Depth-first walk that follows the satisfied branch at owned splits and
/// both branches elsewhere. `value` supplies the party's local features.
pub fn candidate_set<F>(view: &TreeView, party: PartyId, mut value: F) -> Result<CandidateSet, EngineError>
where
    F: FnMut(usize) -> Option<f64>,
{
    let mut leaves = Vec::new();
    let mut stack = vec![view.root];
    while let Some(id) = stack.pop() {
        match view.nodes[id] {
            ViewNode::Owned {
                feature,
                threshold,
                left,
                right,
            } => {
                let x = value(feature).ok_or(ModelError::MissingFeature { feature })?;
                stack.push(if x < threshold { left } else { right });
            }
            ViewNode::Foreign { left, right, .. } => {
                stack.push(right);
                stack.push(left);
            }
            ViewNode::Leaf { leaf_index, .. } => leaves.push(leaf_index),
        }
    }
    leaves.sort_unstable();
    Ok(CandidateSet {
        tree_id: view.tree_id,
        party,
        leaves,
    })
}

/// Leaves present in every set.
pub fn intersect_candidates(sets: &[CandidateSet]) -> Vec<usize> {
    let Some((first, rest)) = sets.split_first() else {
        return Vec::new();
    };
    first
        .leaves
        .iter()
        .copied()
        .filter(|&j| rest.iter().all(|s| s.contains(j)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuestDecisionVector {
    pub tree_id: usize,
    pub entries: Vec<Ciphertext>,
}

/// Entry j encrypts `alpha * w_j` when j is a guest candidate and 0 otherwise,
/// each under fresh randomness.
pub fn guest_decision_vector(
    candidates: &CandidateSet,
    weights: &[f64],
    alpha: f64,
    encryptor: &Encryptor,
    codec: &FixedPointCodec,
) -> Result<GuestDecisionVector, EngineError> {
    let entries = (0..weights.len())
        .map(|j| {
            if candidates.contains(j) {
                encryptor.encrypt(&codec.encode(alpha * weights[j])?)
            } else {
                Ok(encryptor.encrypt_zero())
            }
        })
        .collect::<Result<_, AheError>>()?;
    Ok(GuestDecisionVector {
        tree_id: candidates.tree_id,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostDecisionVector {
    pub tree_id: usize,
    pub bits: Vec<bool>,
}

impl HostDecisionVector {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Bit j is set iff leaf j is a candidate.
pub fn host_decision_vector(candidates: &CandidateSet, leaf_count: usize) -> HostDecisionVector {
    let mut bits = vec![false; leaf_count];
    for &j in &candidates.leaves {
        bits[j] = true;
    }
    HostDecisionVector {
        tree_id: candidates.tree_id,
        bits,
    }
}

fn check_lengths(tree: usize, entries: usize, bits: &[bool]) -> Result<(), EngineError> {
    if entries != bits.len() {
        return Err(EngineError::LengthMismatch {
            tree,
            expected: bits.len(),
            found: entries,
        });
    }
    if !bits.contains(&true) {
        return Err(EngineError::EmptyHostVector { tree });
    }
    Ok(())
}

/// Homomorphic sum of the guest entries selected by the host mask.
pub fn intersect_inner_product(
    pk: &PublicKey,
    guest: &[Ciphertext],
    host: &HostDecisionVector,
) -> Result<Ciphertext, EngineError> {
    check_lengths(host.tree_id, guest.len(), &host.bits)?;
    let selected = guest.iter().zip(&host.bits).filter(|(_, &b)| b).map(|(c, _)| c);
    Ok(pk.sum(selected)?.expect("at least one bit is set"))
}

/// Chain step at an intermediate host: survivors are rerandomized, pruned
/// entries replaced by fresh encryptions of zero, so the next hop cannot match
/// values against what the previous hop saw.
pub fn chain_filter(
    encryptor: &Encryptor,
    entries: &[Ciphertext],
    host: &HostDecisionVector,
) -> Result<Vec<Ciphertext>, EngineError> {
    check_lengths(host.tree_id, entries.len(), &host.bits)?;
    entries
        .iter()
        .zip(&host.bits)
        .map(|(c, &keep)| {
            if keep {
                Ok(encryptor.rerandomize(c)?)
            } else {
                encryptor.public_key().validate(c)?;
                Ok(encryptor.encrypt_zero())
            }
        })
        .collect()
}

/// Sum of per-tree results for one sample.
pub fn aggregate_trees(pk: &PublicKey, per_tree: &[Ciphertext]) -> Result<Ciphertext, EngineError> {
    pk.sum(per_tree)?.ok_or(EngineError::NothingToAggregate)
}

/// Turns a summed margin into a prediction.
pub fn ensemble_combine(margin: f64, strategy: EnsembleStrategy, base_score: f64, trees: usize) -> f64 {
    match strategy {
        EnsembleStrategy::GbdtSigmoid => sigmoid(base_score + margin),
        EnsembleStrategy::RfAverage => margin / trees.max(1) as f64,
    }
}

/// sum_k alpha_k f_k(x) by ordinary traversal.
pub fn plaintext_margin(ensemble: &TreeEnsemble, x: &[f64]) -> Result<f64, EngineError> {
    let mut margin = 0.0;
    for (tree, alpha) in ensemble.trees().iter().zip(ensemble.shrinkage()) {
        let (_, w) = tree.predict_leaf(|f| x.get(f).copied())?;
        margin += alpha * w;
    }
    Ok(margin)
}

/// Reference prediction with every feature in one place.
pub fn plaintext_predict(ensemble: &TreeEnsemble, x: &[f64]) -> Result<f64, EngineError> {
    let margin = plaintext_margin(ensemble, x)?;
    Ok(ensemble_combine(
        margin,
        ensemble.strategy(),
        ensemble.base_score(),
        ensemble.tree_count(),
    ))
}

/// Decodes a decrypted aggregate and applies the guest-side combination.
pub fn finish_prediction(
    decrypted: &BigUint,
    codec: &FixedPointCodec,
    strategy: EnsembleStrategy,
    base_score: f64,
    trees: usize,
) -> f64 {
    ensemble_combine(codec.decode(decrypted), strategy, base_score, trees)
}
