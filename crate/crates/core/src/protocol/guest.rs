use std::collections::HashMap;
use std::ops::Range;
use std::time::Duration;

use rand::RngCore;

use super::transport::Endpoint;
use super::wire::{decode_frame, encode_frame, CipherList, HostAggregate, Message, Mode, SessionId, Setup, SplitQuery, VectorBatch};
use super::{chain_route, GuestParty, Phase, ProtocolConfig, ProtocolError, RunOutcome};
use crate::ahe::{Ciphertext, PublicKeyDoc};
use crate::bench::SampleId;
use crate::engine::{candidate_set, ensemble_combine, guest_decision_vector};
use crate::model::{PartyId, ViewNode, GUEST};

/// How long to look for a host's abort after a send to it fails.
const ABORT_GRACE: Duration = Duration::from_millis(200);

/// Guest side of one session. Holds the only reference to the private key.
pub struct GuestSession {
    pub session_id: SessionId,
    pub phase: Phase,
    pub mode: Mode,
    next_seq: u64,
    last_seen: HashMap<PartyId, u64>,
}

impl GuestSession {
    /// Draws a session id and sends the public key to every host.
    pub fn setup(
        guest: &GuestParty,
        ep: &mut Endpoint,
        mode: Mode,
        route: Vec<PartyId>,
    ) -> Result<GuestSession, ProtocolError> {
        let mut session_id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut session_id);
        let mut s = GuestSession {
            session_id,
            phase: Phase::Setup,
            mode,
            next_seq: 0,
            last_seen: HashMap::new(),
        };
        let setup = Message::Setup(Setup {
            mode,
            scale_bits: guest.codec.scale_bits(),
            public_key: PublicKeyDoc::from(guest.keys.public.clone()),
            model_version: guest.model_version.clone(),
            route,
        });
        for host in 1..guest.sub.party_count {
            s.send(ep, host, &setup)?;
        }
        Ok(s)
    }

    fn send(&mut self, ep: &mut Endpoint, to: PartyId, message: &Message) -> Result<(), ProtocolError> {
        let frame = encode_frame(&self.session_id, self.next_seq, message);
        self.next_seq += 1;
        match ep.send(to, frame) {
            Ok(()) => Ok(()),
            Err(e) => Err(self.abort_from(ep, to).unwrap_or(e.into())),
        }
    }

    /// An abort that `from` sent before going away, if one is waiting.
    fn abort_from(&mut self, ep: &mut Endpoint, from: PartyId) -> Option<ProtocolError> {
        let grace = ProtocolConfig {
            timeout: ABORT_GRACE,
            ..ProtocolConfig::default()
        };
        match self.receive(ep, from, &grace) {
            Err(e @ ProtocolError::Aborted { .. }) => Some(e),
            _ => None,
        }
    }

    /// Next message from `from`, rejecting other sessions, replays and aborts.
    fn receive(&mut self, ep: &mut Endpoint, from: PartyId, config: &ProtocolConfig) -> Result<Message, ProtocolError> {
        let frame = decode_frame(ep.recv_from(from, Some(config.timeout))?)?;
        if frame.session != self.session_id {
            return Err(ProtocolError::SessionMismatch { from });
        }
        if let Some(&last) = self.last_seen.get(&from) {
            if frame.seq <= last {
                return Err(ProtocolError::Replay {
                    from,
                    seq: frame.seq,
                    last,
                });
            }
        }
        self.last_seen.insert(from, frame.seq);
        match frame.message {
            Message::Abort(a) => Err(ProtocolError::Aborted {
                party: from,
                code: a.code,
                reason: a.reason,
            }),
            m => Ok(m),
        }
    }

    fn receive_aggregate(
        &mut self,
        ep: &mut Endpoint,
        from: PartyId,
        ids: &[SampleId],
        config: &ProtocolConfig,
    ) -> Result<HostAggregate, ProtocolError> {
        match self.receive(ep, from, config)? {
            Message::HostAggregate(a) if a.sample_ids == ids => Ok(a),
            Message::HostAggregate(_) => Err(ProtocolError::Config("aggregate is for a different sample batch".into())),
            other => Err(ProtocolError::Unexpected {
                from,
                tag: other.tag(),
                expected: "HostAggregate",
            }),
        }
    }
}

/// Runs the guest for one session and drops the endpoint when done, which
/// releases the hosts.
pub fn run_guest(
    guest: &GuestParty,
    mut ep: Endpoint,
    mode: Mode,
    samples: &[SampleId],
    config: &ProtocolConfig,
) -> Result<RunOutcome, ProtocolError> {
    if config.max_batch == 0 {
        return Err(ProtocolError::Config("max_batch must be at least 1".into()));
    }
    let rows = samples
        .iter()
        .map(|&id| guest.table.row_of(id).ok_or(ProtocolError::UnknownSample(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let parties = guest.sub.party_count;
    let start = ep.now();

    let (margins, used_mode) = if parties == 1 {
        (local_margins(guest, &rows)?, None)
    } else {
        let route = match mode {
            Mode::Chain => chain_route(parties, config)?,
            Mode::Batched | Mode::PerTree if parties != 2 => {
                return Err(ProtocolError::Config(format!(
                    "{mode:?} mode needs exactly one host, got {}",
                    parties - 1
                )))
            }
            _ => Vec::new(),
        };
        let mut session = GuestSession::setup(guest, &mut ep, mode, route.clone())?;
        let margins = match mode {
            Mode::Baseline => baseline_margins(guest, &mut ep, &mut session, &rows, samples, config)?,
            _ => encrypted_margins(guest, &mut ep, &mut session, &rows, samples, &route, config)?,
        };
        session.phase = Phase::Done;
        (margins, Some(mode))
    };
    let elapsed = ep.now() - start;
    drop(ep);

    let k = guest.sub.tree_count();
    let base = guest.sub.base_score.unwrap_or(0.0);
    Ok(RunOutcome {
        mode: used_mode,
        sample_ids: samples.to_vec(),
        predictions: margins
            .iter()
            .map(|&m| ensemble_combine(m, guest.sub.strategy, base, k))
            .collect(),
        margins,
        trace: Default::default(),
        elapsed,
    })
}

fn alphas(guest: &GuestParty) -> &[f64] {
    guest.sub.shrinkage.as_deref().expect("guest view carries shrinkage")
}

/// Every split is local: each candidate set is a single leaf.
fn local_margins(guest: &GuestParty, rows: &[usize]) -> Result<Vec<f64>, ProtocolError> {
    let weights: Vec<Vec<f64>> = guest.sub.trees.iter().map(|t| t.leaf_weights().unwrap()).collect();
    rows.iter()
        .map(|&row| {
            let mut margin = 0.0;
            for ((view, w), alpha) in guest.sub.trees.iter().zip(&weights).zip(alphas(guest)) {
                let c = candidate_set(view, GUEST, |f| guest.table.value(row, f))?;
                debug_assert_eq!(c.len(), 1);
                margin += alpha * w[c.leaves[0]];
            }
            Ok(margin)
        })
        .collect()
}

fn build_vectors(
    guest: &GuestParty,
    weights: &[Vec<f64>],
    rows: &[usize],
    ids: &[SampleId],
    trees: Range<usize>,
) -> Result<VectorBatch, ProtocolError> {
    let leaf_counts = guest.sub.trees[trees.clone()]
        .iter()
        .map(|t| t.leaf_count as u32)
        .collect();
    let mut batch = VectorBatch::new(
        ids.to_vec(),
        trees.start as u32,
        leaf_counts,
        guest.keys.public.ciphertext_bytes(),
    );
    for &row in rows {
        for k in trees.clone() {
            let c = candidate_set(&guest.sub.trees[k], GUEST, |f| guest.table.value(row, f))?;
            let v = guest_decision_vector(&c, &weights[k], alphas(guest)[k], &guest.encryptor, &guest.codec)?;
            for e in &v.entries {
                batch.entries.push(e);
            }
        }
    }
    Ok(batch)
}

fn to_ciphertexts(guest: &GuestParty, list: &CipherList) -> Result<Vec<Ciphertext>, ProtocolError> {
    (0..list.len())
        .map(|i| Ok(Ciphertext::from_parts(&guest.keys.public, list.value(i))?))
        .collect()
}

fn encrypted_margins(
    guest: &GuestParty,
    ep: &mut Endpoint,
    session: &mut GuestSession,
    rows: &[usize],
    samples: &[SampleId],
    route: &[PartyId],
    config: &ProtocolConfig,
) -> Result<Vec<f64>, ProtocolError> {
    let weights: Vec<Vec<f64>> = guest.sub.trees.iter().map(|t| t.leaf_weights().unwrap()).collect();
    let k = guest.sub.tree_count();
    let (first_hop, last_hop) = match session.mode {
        Mode::Chain => (route[0], *route.last().unwrap()),
        _ => (1, 1),
    };
    let tree_groups: Vec<Range<usize>> = match session.mode {
        Mode::PerTree => (0..k).map(|t| t..t + 1).collect(),
        _ => std::iter::once(0..k).collect(),
    };
    let pk = &guest.keys.public;
    let mut margins = Vec::with_capacity(rows.len());
    for (rows, ids) in rows.chunks(config.max_batch).zip(samples.chunks(config.max_batch)) {
        let mut totals: Option<Vec<Ciphertext>> = None;
        for trees in &tree_groups {
            let batch = build_vectors(guest, &weights, rows, ids, trees.clone())?;
            session.phase = Phase::Computed;
            session.send(ep, first_hop, &Message::GuestVectors(batch))?;
            let agg = session.receive_aggregate(ep, last_hop, ids, config)?;
            let values = to_ciphertexts(guest, &agg.values)?;
            totals = Some(match totals {
                None => values,
                Some(acc) => acc
                    .iter()
                    .zip(&values)
                    .map(|(a, b)| pk.add(a, b))
                    .collect::<Result<_, _>>()?,
            });
            session.phase = Phase::Synchronized;
        }
        for q in totals.unwrap_or_default() {
            margins.push(guest.codec.decode(&guest.keys.private.decrypt(&q)?));
        }
    }
    Ok(margins)
}

fn baseline_margins(
    guest: &GuestParty,
    ep: &mut Endpoint,
    session: &mut GuestSession,
    rows: &[usize],
    samples: &[SampleId],
    config: &ProtocolConfig,
) -> Result<Vec<f64>, ProtocolError> {
    let mut margins = Vec::with_capacity(rows.len());
    for (&row, &id) in rows.iter().zip(samples) {
        let mut margin = 0.0;
        for (k, (view, alpha)) in guest.sub.trees.iter().zip(alphas(guest)).enumerate() {
            let mut node = view.root;
            loop {
                node = match view.nodes[node] {
                    ViewNode::Owned {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let x = guest
                            .table
                            .value(row, feature)
                            .ok_or(crate::model::ModelError::MissingFeature { feature })?;
                        if x < threshold {
                            left
                        } else {
                            right
                        }
                    }
                    ViewNode::Foreign {
                        owner: Some(owner),
                        left,
                        right,
                    } => {
                        let query = SplitQuery {
                            tree: k as u32,
                            node: node as u32,
                            sample_id: id,
                        };
                        session.send(ep, owner, &Message::SplitQuery(query))?;
                        match session.receive(ep, owner, config)? {
                            Message::SplitAnswer(a) if a.go_left => left,
                            Message::SplitAnswer(_) => right,
                            other => {
                                return Err(ProtocolError::Unexpected {
                                    from: owner,
                                    tag: other.tag(),
                                    expected: "SplitAnswer",
                                })
                            }
                        }
                    }
                    ViewNode::Foreign { owner: None, .. } => {
                        return Err(ProtocolError::Config("guest view lacks split owners".into()))
                    }
                    ViewNode::Leaf { weight, .. } => {
                        margin += alpha * weight.expect("guest view carries weights");
                        break;
                    }
                };
            }
        }
        margins.push(margin);
    }
    session.phase = Phase::Synchronized;
    Ok(margins)
}
