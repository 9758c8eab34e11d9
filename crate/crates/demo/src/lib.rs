//! Browser demo: candidate sets on a small two-party tree, a real encrypted
//! round on it, and a message-cost comparison against split-by-split querying.
//!
//! Each operation is a plain function returning a serializable result; the
//! `wasm_bindgen` wrappers hand those to the page as JSON strings.

use fedeini::ahe::{keygen, Encryptor, FixedPointCodec, DEFAULT_SCALE_BITS};
use fedeini::engine::{
    candidate_set, ensemble_combine, guest_decision_vector, host_decision_vector, intersect_candidates,
    intersect_inner_product, plaintext_margin,
};
use fedeini::fixtures::{random_ensemble, random_sample, worked_example_ensemble, worked_example_partition};
use fedeini::model::{partition_model, NodeKind, VerticalPartition, GUEST};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const FEATURES: usize = 5;

#[derive(Debug, Serialize)]
pub struct NodeInfo {
    pub id: usize,
    /// Split feature, absent for leaves.
    pub feature: Option<usize>,
    pub threshold: Option<f64>,
    pub owner: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub leaf: Option<usize>,
    pub weight: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Exploration {
    pub nodes: Vec<NodeInfo>,
    pub path: Vec<usize>,
    pub guest: Vec<usize>,
    pub host: Vec<usize>,
    pub intersection: Vec<usize>,
    pub leaf: usize,
}

fn check_sample(x: &[f64]) -> Result<(), String> {
    if x.len() != FEATURES {
        return Err(format!("expected {FEATURES} feature values, got {}", x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err("feature values must be finite".into());
    }
    Ok(())
}

/// Candidate sets of both parties for one sample of the five-feature tree.
pub fn explore(x: &[f64]) -> Result<Exploration, String> {
    check_sample(x)?;
    let ensemble = worked_example_ensemble();
    let partition = worked_example_partition();
    let views = partition_model(&ensemble, &partition).map_err(|e| e.to_string())?;
    let tree = &ensemble.trees()[0];
    let value = |f: usize| x.get(f).copied();
    let sets = views
        .iter()
        .map(|v| candidate_set(&v.trees[0], v.party, value))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let nodes = tree
        .nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } => NodeInfo {
                id: n.id,
                feature: Some(feature),
                threshold: Some(threshold),
                owner: partition.owner(feature),
                children: Some([left, right]),
                leaf: None,
                weight: None,
            },
            NodeKind::Leaf { leaf_index, weight } => NodeInfo {
                id: n.id,
                feature: None,
                threshold: None,
                owner: None,
                children: None,
                leaf: Some(leaf_index),
                weight: Some(weight),
            },
        })
        .collect();
    let (leaf, _) = tree.predict_leaf(value).map_err(|e| e.to_string())?;
    Ok(Exploration {
        nodes,
        path: tree.path(value).map_err(|e| e.to_string())?,
        intersection: intersect_candidates(&sets),
        guest: sets[0].leaves.clone(),
        host: sets[1].leaves.clone(),
        leaf,
    })
}

#[derive(Debug, Serialize)]
pub struct EncryptedRound {
    pub key_bits: u32,
    pub ciphertext_bytes: usize,
    /// Hex prefix of each guest entry as the host receives it.
    pub guest_vector: Vec<String>,
    pub host_mask: Vec<bool>,
    pub aggregate: String,
    pub decrypted_margin: f64,
    pub plaintext_margin: f64,
    pub prediction: f64,
}

fn hex_prefix(text: String) -> String {
    const SHOWN: usize = 24;
    if text.len() <= SHOWN {
        text
    } else {
        format!("{}…", &text[..SHOWN])
    }
}

/// One guest/host exchange on the five-feature tree under a fresh key.
pub fn encrypted_round(x: &[f64], key_bits: u32) -> Result<EncryptedRound, String> {
    check_sample(x)?;
    let ensemble = worked_example_ensemble();
    let views = partition_model(&ensemble, &worked_example_partition()).map_err(|e| e.to_string())?;
    let keys = keygen(key_bits).map_err(|e| e.to_string())?;
    let pk = &keys.public;
    let codec = FixedPointCodec::new(pk, DEFAULT_SCALE_BITS);
    let encryptor = Encryptor::new(pk);
    let value = |f: usize| x.get(f).copied();

    let (guest, host) = (&views[0].trees[0], &views[1].trees[0]);
    let weights = guest.leaf_weights().ok_or("guest view has no weights")?;
    let alpha = ensemble.shrinkage()[0];
    let guest_set = candidate_set(guest, GUEST, value).map_err(|e| e.to_string())?;
    let vector =
        guest_decision_vector(&guest_set, &weights, alpha, &encryptor, &codec).map_err(|e| e.to_string())?;
    let host_set = candidate_set(host, 1, value).map_err(|e| e.to_string())?;
    let mask = host_decision_vector(&host_set, host.leaf_count);
    let aggregate = intersect_inner_product(pk, &vector.entries, &mask).map_err(|e| e.to_string())?;
    let margin = codec.decode(&keys.private.decrypt(&aggregate).map_err(|e| e.to_string())?);

    Ok(EncryptedRound {
        key_bits,
        ciphertext_bytes: pk.ciphertext_bytes(),
        guest_vector: vector.entries.iter().map(|c| hex_prefix(format!("{:x}", c.value()))).collect(),
        host_mask: mask.bits,
        aggregate: hex_prefix(format!("{:x}", aggregate.value())),
        decrypted_margin: margin,
        plaintext_margin: plaintext_margin(&ensemble, x).map_err(|e| e.to_string())?,
        prediction: ensemble_combine(margin, ensemble.strategy(), ensemble.base_score(), ensemble.tree_count()),
    })
}

#[derive(Debug, Serialize)]
pub struct CostPoint {
    pub latency_ms: f64,
    pub fedeini_ms: f64,
    pub baseline_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct CostCurve {
    pub samples: usize,
    /// Messages for the whole batch.
    pub fedeini_messages: usize,
    pub baseline_messages: usize,
    pub points: Vec<CostPoint>,
}

/// Message counts for a random two-party ensemble and the network time they
/// imply at a range of one-way latencies. Compute time is left out.
pub fn cost_curve(trees: usize, depth: usize, samples: usize, max_latency_ms: f64, seed: u64) -> Result<CostCurve, String> {
    if !(1..=500).contains(&trees) || !(1..=8).contains(&depth) || !(1..=10_000).contains(&samples) {
        return Err("trees must be 1..=500, depth 1..=8, samples 1..=10000".into());
    }
    if !(max_latency_ms.is_finite() && max_latency_ms >= 0.0) {
        return Err("latency must be a non-negative number".into());
    }
    const COLUMNS: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ensemble = random_ensemble(&mut rng, trees, depth, COLUMNS);
    let partition = VerticalPartition::guest_first(COLUMNS, COLUMNS / 2, 2).map_err(|e| e.to_string())?;

    let mut baseline = 0;
    for _ in 0..samples {
        let x = random_sample(&mut rng, COLUMNS);
        for tree in ensemble.trees() {
            let path = tree.path(|f| x.get(f).copied()).map_err(|e| e.to_string())?;
            baseline += path
                .iter()
                .filter(|&&id| match tree.node(id).kind {
                    NodeKind::Split { feature, .. } => partition.owner(feature) != Some(GUEST),
                    NodeKind::Leaf { .. } => false,
                })
                .count();
        }
    }
    let (fedeini_messages, baseline_messages) = (2, 2 * baseline);
    let points = (0..=10)
        .map(|i| {
            let latency_ms = max_latency_ms * i as f64 / 10.0;
            CostPoint {
                latency_ms,
                fedeini_ms: fedeini_messages as f64 * latency_ms,
                baseline_ms: baseline_messages as f64 * latency_ms,
            }
        })
        .collect();
    Ok(CostCurve {
        samples,
        fedeini_messages,
        baseline_messages,
        points,
    })
}

fn to_js<T: Serialize>(result: Result<T, String>) -> Result<String, JsError> {
    let value = result.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = explore)]
pub fn explore_js(x: Vec<f64>) -> Result<String, JsError> {
    to_js(explore(&x))
}

#[wasm_bindgen(js_name = encryptedRound)]
pub fn encrypted_round_js(x: Vec<f64>, key_bits: u32) -> Result<String, JsError> {
    to_js(encrypted_round(&x, key_bits))
}

#[wasm_bindgen(js_name = costCurve)]
pub fn cost_curve_js(trees: usize, depth: usize, samples: usize, max_latency_ms: f64, seed: u64) -> Result<String, JsError> {
    to_js(cost_curve(trees, depth, samples, max_latency_ms, seed))
}
