//! Guest and host state machines for the two-stage protocol, the multi-host
//! chain, and the node-by-node baseline.
//!
//! Every party runs as an independent sequential loop over an [`Endpoint`].
//! The `run_*` functions wire a [`Federation`] into an in-process network,
//! run hosts on their own threads and the guest on the caller's thread.

mod guest;
mod host;
pub mod transport;
pub mod wire;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::ahe::{AheError, Encryptor, FixedPointCodec, KeyPair, PublicKey, DEFAULT_SCALE_BITS};
use crate::bench::{vertical_split, BenchError, Dataset, PartyTable, SampleId};
use crate::engine::EngineError;
use crate::model::{
    model_version, partition_model, validate_overflow, ModelError, PartyId, SubModel, TreeEnsemble, VerticalPartition,
};

pub use guest::{run_guest, GuestSession};
pub use host::{serve_host, HostSession};
pub use transport::{
    memory_network, tcp_endpoint, Endpoint, LatencyMode, LinkConfig, ProtocolTrace, TraceEvent, TraceRecorder,
    TransportError,
};
pub use wire::{AbortCode, Mode, SessionId, Tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("wire: {0}")]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ahe(#[from] AheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("model version mismatch: guest has {guest}, party {party} has {local}")]
    VersionMismatch { party: PartyId, guest: String, local: String },
    #[error("party {party} aborted ({code:?}): {reason}")]
    Aborted { party: PartyId, code: AbortCode, reason: String },
    #[error("unexpected {tag} from party {from} while waiting for {expected}")]
    Unexpected { from: PartyId, tag: Tag, expected: &'static str },
    #[error("frame from party {from} belongs to another session")]
    SessionMismatch { from: PartyId },
    #[error("frame from party {from} has sequence {seq}, not after {last}")]
    Replay { from: PartyId, seq: u64, last: u64 },
    #[error("session is already set up")]
    DuplicateSession,
    #[error("chain mode needs at least 3 parties, got {0}")]
    ChainTooShort(usize),
    #[error("chain route: {0}")]
    ChainRoute(String),
    #[error("sample {0} is unknown to this party")]
    UnknownSample(SampleId),
    #[error("tree {tree} node {node} is not a split held by this party")]
    UnknownNode { tree: u32, node: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("party {0} panicked")]
    PartyPanicked(PartyId),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolConfig {
    pub link: LinkConfig,
    /// How long the guest waits for any single reply.
    pub timeout: Duration,
    /// Samples per GuestVectors message.
    pub max_batch: usize,
    /// Send one GuestVectors message per tree instead of one per batch.
    pub per_tree: bool,
    /// Keep raw frames in the trace.
    pub capture_frames: bool,
    /// Host forwarding order for chain mode; defaults to 1, 2, ..., M-1.
    pub route: Option<Vec<PartyId>>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            link: LinkConfig::default(),
            timeout: Duration::from_secs(30),
            max_batch: 1000,
            per_tree: false,
            capture_frames: false,
            route: None,
        }
    }
}

/// Lifecycle of a session at one party.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Keys and session id distributed.
    Setup,
    /// Local candidate sets and decision vectors ready.
    Computed,
    /// Aggregates exchanged.
    Synchronized,
    Done,
}

/// Predictions and measurements of one protocol run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: Option<Mode>,
    pub sample_ids: Vec<SampleId>,
    pub predictions: Vec<f64>,
    /// Decoded sum_k alpha_k f_k(x) per sample.
    pub margins: Vec<f64>,
    pub trace: ProtocolTrace,
    /// Guest clock from session start to the last prediction.
    pub elapsed: Duration,
}

/// The guest's private material and its share of model and data.
pub struct GuestParty {
    pub(crate) sub: SubModel,
    pub(crate) table: PartyTable,
    pub(crate) keys: KeyPair,
    pub(crate) encryptor: Arc<Encryptor>,
    pub(crate) codec: FixedPointCodec,
    pub(crate) model_version: String,
}

impl GuestParty {
    pub fn new(
        sub: SubModel,
        table: PartyTable,
        keys: KeyPair,
        scale_bits: u32,
        model_version: String,
    ) -> Result<Self, ProtocolError> {
        if !sub.trees.iter().all(|t| t.has_weights()) || sub.shrinkage.is_none() {
            return Err(ProtocolError::Config("guest sub-model must carry the leaf weights".into()));
        }
        let encryptor = Arc::new(Encryptor::new(&keys.public));
        let codec = FixedPointCodec::new(&keys.public, scale_bits);
        Ok(GuestParty {
            sub,
            table,
            keys,
            encryptor,
            codec,
            model_version,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn sub_model(&self) -> &SubModel {
        &self.sub
    }

    pub fn table(&self) -> &PartyTable {
        &self.table
    }
}

/// A host's share of model and data. Holds no key material until a session
/// delivers the public key.
pub struct HostParty {
    pub(crate) sub: SubModel,
    pub(crate) table: PartyTable,
    pub(crate) model_version: String,
    encryptor: Mutex<Option<Arc<Encryptor>>>,
}

impl HostParty {
    pub fn new(sub: SubModel, table: PartyTable, model_version: String) -> Self {
        HostParty {
            sub,
            table,
            model_version,
            encryptor: Mutex::new(None),
        }
    }

    pub fn party(&self) -> PartyId {
        self.sub.party
    }

    /// Encryptor for `pk`, built once per key.
    pub(crate) fn encryptor_for(&self, pk: &PublicKey) -> Arc<Encryptor> {
        let mut slot = self.encryptor.lock().unwrap();
        match &*slot {
            Some(e) if e.public_key().key_id() == pk.key_id() => e.clone(),
            _ => {
                let e = Arc::new(Encryptor::new(pk));
                *slot = Some(e.clone());
                e
            }
        }
    }
}

/// The guest's share when each party runs in its own process.
pub fn guest_share(
    ensemble: &TreeEnsemble,
    partition: &VerticalPartition,
    data: &Dataset,
    keys: KeyPair,
    scale_bits: u32,
) -> Result<GuestParty, ProtocolError> {
    validate_overflow(ensemble, &FixedPointCodec::new(&keys.public, scale_bits))?;
    let (sub, table) = share(ensemble, partition, data, crate::model::GUEST)?;
    GuestParty::new(sub, table, keys, scale_bits, model_version(ensemble, partition))
}

/// Host `party`'s share when each party runs in its own process. Only the
/// party's own columns of `data` are read.
pub fn host_share(
    ensemble: &TreeEnsemble,
    partition: &VerticalPartition,
    data: &Dataset,
    party: PartyId,
) -> Result<HostParty, ProtocolError> {
    if party == crate::model::GUEST || party >= partition.party_count() {
        return Err(ProtocolError::Config(format!("party {party} is not a host")));
    }
    let (sub, table) = share(ensemble, partition, data, party)?;
    Ok(HostParty::new(sub, table, model_version(ensemble, partition)))
}

fn share(
    ensemble: &TreeEnsemble,
    partition: &VerticalPartition,
    data: &Dataset,
    party: PartyId,
) -> Result<(SubModel, PartyTable), ProtocolError> {
    let sub = partition_model(ensemble, partition)?.swap_remove(party);
    let table = vertical_split(data, partition)?.swap_remove(party);
    Ok((sub, table))
}

/// One guest and its hosts over a shared, vertically split dataset.
pub struct Federation {
    pub guest: GuestParty,
    pub hosts: Vec<HostParty>,
}

impl Federation {
    /// Partitions model and data and hands each party its share.
    pub fn new(
        ensemble: &TreeEnsemble,
        partition: &VerticalPartition,
        data: &Dataset,
        keys: KeyPair,
        scale_bits: u32,
    ) -> Result<Self, ProtocolError> {
        let codec = FixedPointCodec::new(&keys.public, scale_bits);
        validate_overflow(ensemble, &codec)?;
        let version = model_version(ensemble, partition);
        let subs = partition_model(ensemble, partition)?;
        let tables = vertical_split(data, partition)?;
        let mut parties = subs.into_iter().zip(tables);
        let (gsub, gtable) = parties.next().expect("at least one party");
        let guest = GuestParty::new(gsub, gtable, keys, scale_bits, version.clone())?;
        let hosts = parties
            .map(|(sub, table)| HostParty::new(sub, table, version.clone()))
            .collect();
        Ok(Federation { guest, hosts })
    }

    pub fn with_default_scale(
        ensemble: &TreeEnsemble,
        partition: &VerticalPartition,
        data: &Dataset,
        keys: KeyPair,
    ) -> Result<Self, ProtocolError> {
        Self::new(ensemble, partition, data, keys, DEFAULT_SCALE_BITS)
    }

    pub fn party_count(&self) -> usize {
        1 + self.hosts.len()
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        self.guest.table.sample_ids()
    }
}

fn run_in_memory(
    fed: &Federation,
    mode: Mode,
    samples: &[SampleId],
    config: &ProtocolConfig,
) -> Result<RunOutcome, ProtocolError> {
    let recorder = TraceRecorder::new(config.capture_frames);
    let mut endpoints = memory_network(fed.party_count(), config.link, &recorder);
    let host_endpoints = endpoints.split_off(1);
    let guest_endpoint = endpoints.pop().unwrap();
    let (guest_result, host_results) = std::thread::scope(|s| {
        let handles: Vec<_> = fed
            .hosts
            .iter()
            .zip(host_endpoints)
            .map(|(h, ep)| s.spawn(move || serve_host(h, ep)))
            .collect();
        let g = run_guest(&fed.guest, guest_endpoint, mode, samples, config);
        let hs: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| h.join().unwrap_or(Err(ProtocolError::PartyPanicked(i + 1))))
            .collect();
        (g, hs)
    });
    let mut outcome = guest_result?;
    for r in host_results {
        r?;
    }
    outcome.trace = recorder.take();
    Ok(outcome)
}

/// Two-stage inference. Two parties use one GuestVectors / HostAggregate
/// exchange per batch (or per tree with `per_tree`); more parties go through
/// the chain. A lone guest computes locally.
pub fn run_fed_eini(fed: &Federation, samples: &[SampleId], config: &ProtocolConfig) -> Result<RunOutcome, ProtocolError> {
    match fed.party_count() {
        1 => run_in_memory(fed, Mode::Batched, samples, config),
        2 => run_in_memory(
            fed,
            if config.per_tree { Mode::PerTree } else { Mode::Batched },
            samples,
            config,
        ),
        _ => run_chain(fed, samples, config),
    }
}

/// Guest -> host 1 -> ... -> host M-1 -> guest.
pub fn run_chain(fed: &Federation, samples: &[SampleId], config: &ProtocolConfig) -> Result<RunOutcome, ProtocolError> {
    if fed.party_count() < 3 {
        return Err(ProtocolError::ChainTooShort(fed.party_count()));
    }
    if config.per_tree {
        return Err(ProtocolError::Config("per-tree streaming is only defined for two parties".into()));
    }
    run_in_memory(fed, Mode::Chain, samples, config)
}

/// Node-by-node traversal with one query round trip per host-held split on
/// the realized path.
pub fn run_multi_interactive_baseline(
    fed: &Federation,
    samples: &[SampleId],
    config: &ProtocolConfig,
) -> Result<RunOutcome, ProtocolError> {
    run_in_memory(fed, Mode::Baseline, samples, config)
}

/// Chain route from the config or the default host order, validated.
pub(crate) fn chain_route(party_count: usize, config: &ProtocolConfig) -> Result<Vec<PartyId>, ProtocolError> {
    let route = config.route.clone().unwrap_or_else(|| (1..party_count).collect());
    let mut sorted = route.clone();
    sorted.sort_unstable();
    if sorted != (1..party_count).collect::<Vec<_>>() {
        return Err(ProtocolError::ChainRoute(format!(
            "{route:?} is not an ordering of hosts 1..{}",
            party_count - 1
        )));
    }
    Ok(route)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahe::keygen_with_rng;
    use crate::engine::plaintext_predict;
    use crate::fixtures::{random_ensemble, random_sample};
    use crate::model::NodeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FEATURES: usize = 6;

    fn setup(parties: usize, rows: usize, seed: u64) -> (TreeEnsemble, Dataset, Federation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ensemble = random_ensemble(&mut rng, 4, 3, FEATURES);
        let values: Vec<f64> = (0..rows).flat_map(|_| random_sample(&mut rng, FEATURES)).collect();
        let names = (0..FEATURES).map(|f| format!("x{f}")).collect();
        let data = Dataset::new(names, values, vec![0.0; rows], None).unwrap();
        let guest_features = if parties == 1 { FEATURES } else { 2 };
        let partition = VerticalPartition::guest_first(FEATURES, guest_features, parties).unwrap();
        let keys = keygen_with_rng(256, &mut rng).unwrap();
        let fed = Federation::with_default_scale(&ensemble, &partition, &data, keys).unwrap();
        (ensemble, data, fed)
    }

    fn assert_matches_oracle(ensemble: &TreeEnsemble, data: &Dataset, out: &RunOutcome) {
        assert_eq!(out.predictions.len(), data.rows());
        for (i, p) in out.predictions.iter().enumerate() {
            let want = plaintext_predict(ensemble, data.row(i)).unwrap();
            assert!((p - want).abs() < 1e-6, "row {i}: {p} vs {want}");
        }
    }

    #[test]
    fn two_parties_use_one_round_trip() {
        let (ensemble, data, fed) = setup(2, 30, 1);
        let out = run_fed_eini(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap();
        assert_matches_oracle(&ensemble, &data, &out);
        assert_eq!(out.mode, Some(Mode::Batched));
        assert_eq!(out.trace.protocol_messages(), 2);
        assert_eq!(out.trace.count(Tag::GuestVectors), 1);
        assert_eq!(out.trace.count(Tag::HostAggregate), 1);
        assert_eq!(out.trace.count(Tag::Setup), 1);
    }

    #[test]
    fn batches_and_per_tree_streaming() {
        let (ensemble, data, fed) = setup(2, 25, 2);
        let config = ProtocolConfig {
            max_batch: 10,
            ..Default::default()
        };
        let out = run_fed_eini(&fed, fed.sample_ids(), &config).unwrap();
        assert_matches_oracle(&ensemble, &data, &out);
        assert_eq!(out.trace.protocol_messages(), 6);

        let config = ProtocolConfig {
            per_tree: true,
            ..Default::default()
        };
        let out = run_fed_eini(&fed, fed.sample_ids(), &config).unwrap();
        assert_matches_oracle(&ensemble, &data, &out);
        assert_eq!(out.trace.protocol_messages(), 2 * ensemble.tree_count());
    }

    #[test]
    fn lone_guest_sends_nothing() {
        let (ensemble, data, fed) = setup(1, 20, 3);
        let out = run_fed_eini(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap();
        assert_matches_oracle(&ensemble, &data, &out);
        assert_eq!(out.trace.message_count(), 0);
        assert_eq!(out.mode, None);
    }

    #[test]
    fn chain_uses_one_message_per_party() {
        for parties in [3, 4] {
            let (ensemble, data, fed) = setup(parties, 15, 4 + parties as u64);
            let out = run_fed_eini(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap();
            assert_matches_oracle(&ensemble, &data, &out);
            assert_eq!(out.mode, Some(Mode::Chain));
            assert_eq!(out.trace.protocol_messages(), parties);
            assert_eq!(out.trace.count(Tag::ChainForward), parties - 2);
            assert_eq!(out.trace.count(Tag::Setup), parties - 1);
        }
    }

    #[test]
    fn chain_follows_a_custom_route() {
        let (ensemble, data, fed) = setup(4, 10, 9);
        let config = ProtocolConfig {
            route: Some(vec![3, 1, 2]),
            ..Default::default()
        };
        let out = run_chain(&fed, fed.sample_ids(), &config).unwrap();
        assert_matches_oracle(&ensemble, &data, &out);
        let hops: Vec<_> = out
            .trace
            .events
            .iter()
            .filter(|e| e.tag != Tag::Setup)
            .map(|e| (e.from, e.to))
            .collect();
        assert_eq!(hops, vec![(0, 3), (3, 1), (1, 2), (2, 0)]);

        let bad = ProtocolConfig {
            route: Some(vec![1, 1, 2]),
            ..Default::default()
        };
        assert!(matches!(run_chain(&fed, fed.sample_ids(), &bad), Err(ProtocolError::ChainRoute(_))));
    }

    #[test]
    fn chain_needs_three_parties() {
        let (_, _, fed) = setup(2, 5, 10);
        let err = run_chain(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap_err();
        assert_eq!(err, ProtocolError::ChainTooShort(2));
    }

    #[test]
    fn baseline_queries_every_host_split_on_the_path() {
        for parties in [2, 3] {
            let (ensemble, data, fed) = setup(parties, 12, 20 + parties as u64);
            let partition = VerticalPartition::guest_first(FEATURES, 2, parties).unwrap();
            let out = run_multi_interactive_baseline(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap();
            assert_matches_oracle(&ensemble, &data, &out);

            let mut queries = 0;
            for i in 0..data.rows() {
                let x = data.row(i);
                for tree in ensemble.trees() {
                    let mut node = tree.root();
                    while let NodeKind::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } = tree.node(node).kind
                    {
                        if partition.owner(feature) != Some(GUEST_ID) {
                            queries += 1;
                        }
                        node = if x[feature] < threshold { left } else { right };
                    }
                }
            }
            assert_eq!(out.trace.count(Tag::SplitQuery), queries);
            assert_eq!(out.trace.count(Tag::SplitAnswer), queries);
            assert_eq!(out.trace.protocol_messages(), 2 * queries);
        }
    }

    const GUEST_ID: PartyId = crate::model::GUEST;

    #[test]
    fn version_mismatch_aborts() {
        let (_, _, mut fed) = setup(2, 5, 30);
        fed.hosts[0].model_version = "other".into();
        let err = run_fed_eini(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap_err();
        assert!(
            matches!(
                err,
                ProtocolError::Aborted {
                    party: 1,
                    code: AbortCode::ModelVersion,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn unknown_sample_is_rejected() {
        let (_, _, fed) = setup(2, 5, 31);
        let err = run_fed_eini(&fed, &[999], &ProtocolConfig::default()).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownSample(999));
    }

    #[test]
    fn latency_is_charged_per_hop() {
        let (_, _, fed) = setup(3, 5, 32);
        let config = ProtocolConfig {
            link: LinkConfig {
                latency: Duration::from_secs(2),
                mode: LatencyMode::Simulated,
            },
            ..Default::default()
        };
        let out = run_fed_eini(&fed, fed.sample_ids(), &config).unwrap();
        assert!(out.elapsed >= Duration::from_secs(6), "{:?}", out.elapsed);
        assert!(out.elapsed < Duration::from_secs(7), "{:?}", out.elapsed);
    }

    #[test]
    fn frames_carry_no_secrets_or_raw_features() {
        let (_, data, fed) = setup(3, 8, 33);
        let secrets = fed.guest.keys.private.secret_fingerprints();
        for run in [run_fed_eini, run_multi_interactive_baseline] {
            let config = ProtocolConfig {
                capture_frames: true,
                ..Default::default()
            };
            let out = run(&fed, fed.sample_ids(), &config).unwrap();
            assert!(!out.trace.frames.is_empty());
            for frame in &out.trace.frames {
                for s in &secrets {
                    assert!(!frame.windows(s.len()).any(|w| w == s.as_slice()));
                }
                for v in data.row(0) {
                    let bytes = v.to_be_bytes();
                    assert!(!frame.windows(8).any(|w| w == bytes));
                }
            }
        }
    }

    #[test]
    fn guest_vectors_hide_the_candidate_pattern() {
        // Two encryptions of the same vector share no ciphertext.
        let (_, _, fed) = setup(2, 3, 34);
        let config = ProtocolConfig {
            capture_frames: true,
            ..Default::default()
        };
        let a = run_fed_eini(&fed, fed.sample_ids(), &config).unwrap();
        let b = run_fed_eini(&fed, fed.sample_ids(), &config).unwrap();
        let vectors = |o: &RunOutcome| {
            let i = o.trace.events.iter().position(|e| e.tag == Tag::GuestVectors).unwrap();
            match wire::decode_frame(o.trace.frames[i].clone()).unwrap().message {
                wire::Message::GuestVectors(v) => v,
                _ => unreachable!(),
            }
        };
        let (va, vb) = (vectors(&a), vectors(&b));
        assert_eq!(va.entries.len(), vb.entries.len());
        for i in 0..va.entries.len() {
            assert_ne!(va.entries.raw(i), vb.entries.raw(i));
        }
    }
}
