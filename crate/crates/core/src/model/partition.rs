use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnsembleStrategy, ModelError, NodeId, NodeKind, TreeEnsemble};

pub type PartyId = usize;

/// The guest (active party) is always party 0.
pub const GUEST: PartyId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartyRole {
    Guest,
    Host,
}

/// Assignment of feature columns to parties.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    party_count: usize,
    owners: Vec<PartyId>,
}

impl VerticalPartition {
    pub fn new(party_count: usize, owners: Vec<PartyId>) -> Result<Self, ModelError> {
        if party_count == 0 {
            return Err(ModelError::Partition("at least one party is required".into()));
        }
        if let Some((f, &p)) = owners.iter().enumerate().find(|(_, &p)| p >= party_count) {
            return Err(ModelError::Partition(format!(
                "feature {f} assigned to party {p}, but only {party_count} parties exist"
            )));
        }
        Ok(VerticalPartition { party_count, owners })
    }

    /// Everything on the guest.
    pub fn single_party(features: usize) -> Self {
        VerticalPartition {
            party_count: 1,
            owners: vec![GUEST; features],
        }
    }

    /// The first `guest_features` columns go to the guest; the rest are dealt
    /// to the hosts in contiguous, nearly equal blocks.
    pub fn guest_first(features: usize, guest_features: usize, party_count: usize) -> Result<Self, ModelError> {
        if guest_features > features {
            return Err(ModelError::Partition(format!(
                "guest_first:{guest_features} exceeds the {features} available columns"
            )));
        }
        if party_count == 1 && guest_features != features {
            return Err(ModelError::Partition("a single party must own every column".into()));
        }
        let hosts = party_count.saturating_sub(1).max(1);
        let rest = features - guest_features;
        let owners = (0..features)
            .map(|f| {
                if f < guest_features {
                    GUEST
                } else {
                    1 + ((f - guest_features) * hosts) / rest.max(1)
                }
            })
            .collect();
        Self::new(party_count, owners)
    }

    /// Uniformly random owners; every party gets at least one column when possible.
    pub fn random<R: Rng + ?Sized>(features: usize, party_count: usize, rng: &mut R) -> Self {
        let mut owners: Vec<PartyId> = (0..features).map(|_| rng.gen_range(0..party_count)).collect();
        if features >= party_count {
            let mut order: Vec<usize> = (0..features).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for (p, &f) in order.iter().take(party_count).enumerate() {
                owners[f] = p;
            }
        }
        VerticalPartition { party_count, owners }
    }

    /// Parses `guest_first:N` or a comma-separated owner per column.
    pub fn parse(spec: &str, features: usize, party_count: usize) -> Result<Self, ModelError> {
        let spec = spec.trim();
        if let Some(n) = spec.strip_prefix("guest_first:") {
            let n = n
                .trim()
                .parse()
                .map_err(|_| ModelError::Partition(format!("bad guest_first count `{n}`")))?;
            return Self::guest_first(features, n, party_count);
        }
        let owners: Vec<PartyId> = spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| ModelError::Partition(format!("bad party id `{s}`")))
            })
            .collect::<Result<_, _>>()?;
        if owners.len() != features {
            return Err(ModelError::Partition(format!(
                "{} owners listed for {features} columns",
                owners.len()
            )));
        }
        Self::new(party_count, owners)
    }

    pub fn party_count(&self) -> usize {
        self.party_count
    }

    pub fn feature_count(&self) -> usize {
        self.owners.len()
    }

    pub fn owner(&self, feature: usize) -> Option<PartyId> {
        self.owners.get(feature).copied()
    }

    pub fn owners(&self) -> &[PartyId] {
        &self.owners
    }

    pub fn role(&self, party: PartyId) -> PartyRole {
        if party == GUEST {
            PartyRole::Guest
        } else {
            PartyRole::Host
        }
    }

    /// Global column ids held by `party`, ascending.
    pub fn features_of(&self, party: PartyId) -> Vec<usize> {
        (0..self.owners.len()).filter(|&f| self.owners[f] == party).collect()
    }

    /// d_m for every party.
    pub fn dimensions(&self) -> Vec<usize> {
        let mut d = vec![0; self.party_count];
        for &p in &self.owners {
            d[p] += 1;
        }
        d
    }
}

/// One node of a party's view of a tree skeleton.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewNode {
    /// Split held by this party: full rule known.
    Owned {
        feature: usize,
        threshold: f64,
        left: NodeId,
        right: NodeId,
    },
    /// Split held elsewhere. Only the guest learns which party owns it.
    Foreign {
        owner: Option<PartyId>,
        left: NodeId,
        right: NodeId,
    },
    Leaf {
        leaf_index: usize,
        weight: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeView {
    pub tree_id: usize,
    pub root: NodeId,
    pub leaf_count: usize,
    pub nodes: Vec<ViewNode>,
}

impl TreeView {
    pub fn owned_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, ViewNode::Owned { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_weights(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, ViewNode::Leaf { weight: Some(_), .. }))
    }

    /// Leaf weights by leaf index, if this view carries them.
    pub fn leaf_weights(&self) -> Option<Vec<f64>> {
        let mut w = vec![0.0; self.leaf_count];
        for n in &self.nodes {
            if let ViewNode::Leaf { leaf_index, weight } = n {
                w[*leaf_index] = (*weight)?;
            }
        }
        Some(w)
    }
}

/// What party `m` holds of the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct SubModel {
    pub party: PartyId,
    pub role: PartyRole,
    pub party_count: usize,
    pub strategy: EnsembleStrategy,
    pub trees: Vec<TreeView>,
    /// Guest only.
    pub shrinkage: Option<Vec<f64>>,
    /// Guest only.
    pub base_score: Option<f64>,
}

impl SubModel {
    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Features this party must supply at inference time.
    pub fn required_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                ViewNode::Owned { feature, .. } => Some(*feature),
                _ => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    fn check_disclosure(&self) -> Result<(), ModelError> {
        if self.role == PartyRole::Host
            && (self.shrinkage.is_some() || self.base_score.is_some() || self.trees.iter().any(|t| t.has_weights()))
        {
            return Err(ModelError::WeightInHostView { party: self.party });
        }
        Ok(())
    }
}

/// Splits the ensemble into one view per party. Every party keeps the full
/// skeleton; split rules stay with their owner and weights with the guest.
pub fn partition_model(ensemble: &TreeEnsemble, partition: &VerticalPartition) -> Result<Vec<SubModel>, ModelError> {
    for t in ensemble.trees() {
        for f in t.features() {
            if partition.owner(f).is_none() {
                return Err(ModelError::UnownedFeature { feature: f });
            }
        }
    }
    if partition.feature_count() != ensemble.feature_count() {
        return Err(ModelError::Partition(format!(
            "partition covers {} columns, model has {}",
            partition.feature_count(),
            ensemble.feature_count()
        )));
    }

    let views = (0..partition.party_count())
        .map(|party| {
            let role = partition.role(party);
            let guest = role == PartyRole::Guest;
            let trees = ensemble
                .trees()
                .iter()
                .enumerate()
                .map(|(k, tree)| TreeView {
                    tree_id: k,
                    root: tree.root(),
                    leaf_count: tree.leaf_count(),
                    nodes: tree
                        .nodes()
                        .iter()
                        .map(|n| match n.kind {
                            NodeKind::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            } => {
                                let owner = partition.owner(feature).expect("checked above");
                                if owner == party {
                                    ViewNode::Owned {
                                        feature,
                                        threshold,
                                        left,
                                        right,
                                    }
                                } else {
                                    ViewNode::Foreign {
                                        owner: guest.then_some(owner),
                                        left,
                                        right,
                                    }
                                }
                            }
                            NodeKind::Leaf { leaf_index, weight } => ViewNode::Leaf {
                                leaf_index,
                                weight: guest.then_some(weight),
                            },
                        })
                        .collect(),
                })
                .collect();
            SubModel {
                party,
                role,
                party_count: partition.party_count(),
                strategy: ensemble.strategy(),
                trees,
                shrinkage: guest.then(|| ensemble.shrinkage().to_vec()),
                base_score: guest.then_some(ensemble.base_score()),
            }
        })
        .collect::<Vec<_>>();

    for v in &views {
        v.check_disclosure()?;
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn single_party_view_is_the_full_model() {
        let e = fixtures::worked_example_ensemble();
        let views = partition_model(&e, &VerticalPartition::single_party(5)).unwrap();
        assert_eq!(views.len(), 1);
        let t = &views[0].trees[0];
        assert_eq!(t.owned_nodes().len(), e.trees()[0].internal_nodes().count());
        assert_eq!(t.leaf_weights().unwrap(), e.trees()[0].leaf_weights());
    }

    #[test]
    fn worked_example_ownership() {
        let e = fixtures::worked_example_ensemble();
        let views = partition_model(&e, &fixtures::worked_example_partition()).unwrap();
        assert_eq!(views[0].trees[0].owned_nodes().len(), 2);
        assert_eq!(views[1].trees[0].owned_nodes().len(), 3);
        assert!(views[0].trees[0].has_weights());
        assert!(!views[1].trees[0].has_weights());
        assert!(views[1].shrinkage.is_none());
        // guest knows which host owns each foreign node; the host does not
        assert!(views[0].trees[0]
            .nodes
            .iter()
            .any(|n| matches!(n, ViewNode::Foreign { owner: Some(1), .. })));
        assert!(views[1].trees[0]
            .nodes
            .iter()
            .all(|n| !matches!(n, ViewNode::Foreign { owner: Some(_), .. })));
    }

    #[test]
    fn random_partitions_cover_internal_nodes_disjointly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let e = fixtures::random_ensemble(&mut rng, 5, 4, 8);
            let parties = rng.gen_range(1..=4);
            let p = VerticalPartition::random(8, parties, &mut rng);
            let views = partition_model(&e, &p).unwrap();
            for (k, tree) in e.trees().iter().enumerate() {
                let all: BTreeSet<NodeId> = tree.internal_nodes().map(|n| n.id).collect();
                let mut union = BTreeSet::new();
                for v in &views {
                    for id in v.trees[k].owned_nodes() {
                        assert!(union.insert(id), "node {id} owned twice");
                    }
                }
                assert_eq!(union, all);
            }
        }
    }

    #[test]
    fn partition_parsing() {
        let p = VerticalPartition::parse("guest_first:5", 10, 2).unwrap();
        assert_eq!(p.dimensions(), vec![5, 5]);
        let p = VerticalPartition::parse("guest_first:4", 10, 4).unwrap();
        assert_eq!(p.dimensions(), vec![4, 2, 2, 2]);
        assert_eq!(p.features_of(3), vec![8, 9]);
        let p = VerticalPartition::parse("0, 1,1,0", 4, 2).unwrap();
        assert_eq!(p.owners(), &[0, 1, 1, 0]);
        assert!(VerticalPartition::parse("0,2", 2, 2).is_err());
        assert!(VerticalPartition::parse("0,1", 3, 2).is_err());
        assert!(VerticalPartition::parse("guest_first:x", 3, 2).is_err());
        assert!(VerticalPartition::parse("guest_first:11", 10, 2).is_err());
        let p = VerticalPartition::guest_first(10, 0, 2).unwrap();
        assert_eq!(p.dimensions(), vec![0, 10]);
    }

    #[test]
    fn uncovered_features_are_rejected() {
        let e = fixtures::worked_example_ensemble();
        let short = VerticalPartition::new(2, vec![0, 0, 1]).unwrap();
        assert_eq!(
            partition_model(&e, &short).unwrap_err(),
            ModelError::UnownedFeature { feature: 3 }
        );
    }
}
