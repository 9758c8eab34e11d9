//! Versioned JSON model document. Field reference: `schema/model.schema.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    DecisionTree, EnsembleStrategy, ModelError, NodeKind, TreeEnsemble, TreeNode, VerticalPartition,
};

pub const FORMAT: &str = "fedeini-model";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format: String,
    pub schema_version: u32,
    pub meta: MetaDoc,
    pub feature_names: Vec<String>,
    pub trees: Vec<TreeDoc>,
    pub partition: PartitionDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaDoc {
    /// K
    pub trees: usize,
    pub depth: usize,
    pub strategy: EnsembleStrategy,
    pub base_score: f64,
    /// alpha_k, one per tree
    pub shrinkage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDoc {
    pub id: usize,
    pub root: usize,
    pub leaf_count: usize,
    pub nodes: Vec<NodeDoc>,
}

/// Flat node record; which fields are required depends on `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDoc {
    pub parties: usize,
    /// Owning party per feature column; party 0 is the guest.
    pub owners: Vec<usize>,
}

impl ModelDocument {
    pub fn from_model(ensemble: &TreeEnsemble, partition: &VerticalPartition) -> Self {
        ModelDocument {
            format: FORMAT.to_string(),
            schema_version: SCHEMA_VERSION,
            meta: MetaDoc {
                trees: ensemble.tree_count(),
                depth: ensemble.depth(),
                strategy: ensemble.strategy(),
                base_score: ensemble.base_score(),
                shrinkage: ensemble.shrinkage().to_vec(),
            },
            feature_names: ensemble.feature_names().to_vec(),
            trees: ensemble
                .trees()
                .iter()
                .enumerate()
                .map(|(k, t)| TreeDoc {
                    id: k,
                    root: t.root(),
                    leaf_count: t.leaf_count(),
                    nodes: t.nodes().iter().map(node_doc).collect(),
                })
                .collect(),
            partition: PartitionDoc {
                parties: partition.party_count(),
                owners: partition.owners().to_vec(),
            },
        }
    }

    pub fn into_model(self) -> Result<(TreeEnsemble, VerticalPartition), ModelError> {
        let doc_err = |field: &str, reason: String| ModelError::Document {
            field: field.to_string(),
            reason,
        };
        if self.format != FORMAT {
            return Err(doc_err("format", format!("expected `{FORMAT}`, got `{}`", self.format)));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(doc_err(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        if self.meta.trees != self.trees.len() {
            return Err(doc_err(
                "meta.trees",
                format!("declares {} trees, document has {}", self.meta.trees, self.trees.len()),
            ));
        }

        let mut trees = Vec::with_capacity(self.trees.len());
        for (k, t) in self.trees.into_iter().enumerate() {
            if t.id != k {
                return Err(doc_err(&format!("trees[{k}].id"), format!("expected {k}, got {}", t.id)));
            }
            let nodes = t
                .nodes
                .iter()
                .map(|n| tree_node(k, n))
                .collect::<Result<Vec<_>, _>>()?;
            let tree = DecisionTree::new(k, nodes, t.root)?;
            if tree.leaf_count() != t.leaf_count {
                return Err(doc_err(
                    &format!("trees[{k}].leaf_count"),
                    format!("declares {}, tree has {}", t.leaf_count, tree.leaf_count()),
                ));
            }
            trees.push(tree);
        }

        let ensemble = TreeEnsemble::new(
            trees,
            self.meta.strategy,
            self.meta.shrinkage,
            self.meta.base_score,
            self.feature_names,
        )?;
        if ensemble.depth() != self.meta.depth {
            return Err(doc_err(
                "meta.depth",
                format!("declares {}, trees have {}", self.meta.depth, ensemble.depth()),
            ));
        }
        let partition = VerticalPartition::new(self.partition.parties, self.partition.owners)?;
        if partition.feature_count() != ensemble.feature_count() {
            return Err(doc_err(
                "partition.owners",
                format!(
                    "{} owners for {} features",
                    partition.feature_count(),
                    ensemble.feature_count()
                ),
            ));
        }
        Ok((ensemble, partition))
    }
}

fn node_doc(n: &TreeNode) -> NodeDoc {
    match n.kind {
        NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } => NodeDoc {
            id: n.id,
            kind: "split".into(),
            feature: Some(feature),
            threshold: Some(threshold),
            left: Some(left),
            right: Some(right),
            leaf_index: None,
            weight: None,
        },
        NodeKind::Leaf { leaf_index, weight } => NodeDoc {
            id: n.id,
            kind: "leaf".into(),
            feature: None,
            threshold: None,
            left: None,
            right: None,
            leaf_index: Some(leaf_index),
            weight: Some(weight),
        },
    }
}

fn tree_node(tree: usize, n: &NodeDoc) -> Result<TreeNode, ModelError> {
    fn need<T>(v: Option<T>, tree: usize, n: &NodeDoc, field: &str) -> Result<T, ModelError> {
        v.ok_or_else(|| ModelError::Node {
            tree,
            node: n.id,
            reason: format!("{} node is missing `{field}`", n.kind),
        })
    }
    let stray = |present: bool, field: &str| {
        if present {
            Err(ModelError::Node {
                tree,
                node: n.id,
                reason: format!("{} node must not carry `{field}`", n.kind),
            })
        } else {
            Ok(())
        }
    };
    let kind = match n.kind.as_str() {
        "split" => {
            stray(n.leaf_index.is_some(), "leaf_index")?;
            stray(n.weight.is_some(), "weight")?;
            NodeKind::Split {
                feature: need(n.feature, tree, n, "feature")?,
                threshold: need(n.threshold, tree, n, "threshold")?,
                left: need(n.left, tree, n, "left")?,
                right: need(n.right, tree, n, "right")?,
            }
        }
        "leaf" => {
            stray(n.feature.is_some() || n.threshold.is_some(), "feature/threshold")?;
            stray(n.left.is_some() || n.right.is_some(), "children")?;
            NodeKind::Leaf {
                leaf_index: need(n.leaf_index, tree, n, "leaf_index")?,
                weight: need(n.weight, tree, n, "weight")?,
            }
        }
        other => {
            return Err(ModelError::Node {
                tree,
                node: n.id,
                reason: format!("unknown node kind `{other}`"),
            })
        }
    };
    Ok(TreeNode { id: n.id, kind })
}

/// Serializes ensemble and partition as a pretty-printed JSON document.
pub fn save_model(ensemble: &TreeEnsemble, partition: &VerticalPartition) -> String {
    let doc = ModelDocument::from_model(ensemble, partition);
    serde_json::to_string_pretty(&doc).expect("model documents always serialize")
}

pub fn load_model(text: &str) -> Result<(TreeEnsemble, VerticalPartition), ModelError> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| ModelError::Document {
        field: "<root>".into(),
        reason: e.to_string(),
    })?;
    doc.into_model()
}

pub fn save_model_file(
    path: impl AsRef<Path>,
    ensemble: &TreeEnsemble,
    partition: &VerticalPartition,
) -> Result<(), ModelError> {
    std::fs::write(path, save_model(ensemble, partition)).map_err(|e| ModelError::Io(e.to_string()))
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<(TreeEnsemble, VerticalPartition), ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(e.to_string()))?;
    load_model(&text)
}

/// Content fingerprint exchanged at session setup so parties can detect
/// that they loaded different models.
pub fn model_version(ensemble: &TreeEnsemble, partition: &VerticalPartition) -> String {
    let digest = Sha256::digest(save_model(ensemble, partition).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
