use std::collections::HashMap;

use super::transport::{Delivery, Endpoint};
use super::wire::{
    decode_frame, encode_frame, Abort, AbortCode, CipherList, Frame, HostAggregate, Message, Mode, SessionId,
    SplitAnswer, SplitQuery, VectorBatch,
};
use super::{HostParty, Phase, ProtocolError};
use crate::ahe::{Ciphertext, PublicKey};
use crate::engine::{aggregate_trees, candidate_set, chain_filter, host_decision_vector, intersect_inner_product};
use crate::model::{PartyId, ViewNode, GUEST};

/// Host side of one session: the public key and nothing that decrypts.
///
/// ```compile_fail
/// fn peek(s: &fedeini::protocol::HostSession) {
///     let _ = s.private_key();
/// }
/// ```
pub struct HostSession {
    pub session_id: SessionId,
    pub phase: Phase,
    pub mode: Mode,
    public_key: PublicKey,
    route: Vec<PartyId>,
    next_seq: u64,
    last_seen: HashMap<PartyId, u64>,
}

impl HostSession {
    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    /// Party this host receives vectors from and party it hands them to.
    fn neighbours(&self, me: PartyId) -> Result<(PartyId, PartyId), ProtocolError> {
        if self.mode != Mode::Chain {
            return Ok((GUEST, GUEST));
        }
        let pos = self
            .route
            .iter()
            .position(|&p| p == me)
            .ok_or_else(|| ProtocolError::ChainRoute(format!("party {me} is not on the route {:?}", self.route)))?;
        let prev = if pos == 0 { GUEST } else { self.route[pos - 1] };
        let next = self.route.get(pos + 1).copied().unwrap_or(GUEST);
        Ok((prev, next))
    }

    fn send(&mut self, ep: &mut Endpoint, to: PartyId, message: &Message) -> Result<(), ProtocolError> {
        let frame = encode_frame(&self.session_id, self.next_seq, message);
        self.next_seq += 1;
        ep.send(to, frame)?;
        Ok(())
    }

    fn admit(&mut self, from: PartyId, frame: &Frame) -> Result<(), ProtocolError> {
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
        Ok(())
    }
}

fn abort_code(e: &ProtocolError) -> AbortCode {
    match e {
        ProtocolError::VersionMismatch { .. } => AbortCode::ModelVersion,
        ProtocolError::DuplicateSession => AbortCode::DuplicateSession,
        ProtocolError::UnknownNode { .. } => AbortCode::UnknownNode,
        ProtocolError::UnknownSample(_) => AbortCode::UnknownSample,
        ProtocolError::Wire(_)
        | ProtocolError::Unexpected { .. }
        | ProtocolError::SessionMismatch { .. }
        | ProtocolError::Replay { .. }
        | ProtocolError::ChainRoute(_) => AbortCode::BadMessage,
        _ => AbortCode::Internal,
    }
}

/// Serves requests until the guest disconnects. On any error the guest is
/// sent an Abort and the error is returned.
pub fn serve_host(host: &HostParty, mut ep: Endpoint) -> Result<(), ProtocolError> {
    let mut session: Option<HostSession> = None;
    loop {
        let (from, bytes) = match ep.recv_any(None) {
            Ok(Delivery::Frame(from, bytes)) => (from, bytes),
            Ok(Delivery::Closed(GUEST)) => return Ok(()),
            Ok(Delivery::Closed(_)) => continue,
            Err(super::TransportError::Disconnected(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let decoded = decode_frame(bytes);
        let frame_session = decoded.as_ref().ok().map(|f| f.session);
        if let Err(e) = decoded.map_err(ProtocolError::from).and_then(|f| handle(host, &mut ep, &mut session, from, f)) {
            log::warn!("party {}: {e}", host.party());
            let abort = Message::Abort(Abort {
                code: abort_code(&e),
                reason: e.to_string(),
            });
            // Answer under the session the guest is using, even if it was never set up here.
            let seq = session.as_ref().map_or(0, |s| s.next_seq);
            let id = frame_session.or(session.as_ref().map(|s| s.session_id)).unwrap_or_default();
            let _ = ep.send(GUEST, encode_frame(&id, seq, &abort));
            return Err(e);
        }
    }
}

fn handle(
    host: &HostParty,
    ep: &mut Endpoint,
    session: &mut Option<HostSession>,
    from: PartyId,
    frame: Frame,
) -> Result<(), ProtocolError> {
    if let Message::Setup(setup) = &frame.message {
        if from != GUEST {
            return Err(ProtocolError::Unexpected {
                from,
                tag: frame.message.tag(),
                expected: "Setup from the guest",
            });
        }
        if session.as_ref().is_some_and(|s| s.session_id == frame.session) {
            return Err(ProtocolError::DuplicateSession);
        }
        if setup.model_version != host.model_version {
            return Err(ProtocolError::VersionMismatch {
                party: host.party(),
                guest: setup.model_version.clone(),
                local: host.model_version.clone(),
            });
        }
        let public_key = PublicKey::try_from(setup.public_key.clone())?;
        let s = HostSession {
            session_id: frame.session,
            phase: Phase::Setup,
            mode: setup.mode,
            public_key,
            route: setup.route.clone(),
            next_seq: 0,
            last_seen: HashMap::from([(GUEST, frame.seq)]),
        };
        s.neighbours(host.party())?;
        *session = Some(s);
        return Ok(());
    }

    let s = session.as_mut().ok_or(ProtocolError::Unexpected {
        from,
        tag: frame.message.tag(),
        expected: "Setup",
    })?;
    s.admit(from, &frame)?;
    let tag = frame.message.tag();
    let (prev, next) = s.neighbours(host.party())?;
    match (s.mode, frame.message) {
        (Mode::Batched | Mode::PerTree, Message::GuestVectors(batch)) if from == GUEST => {
            s.phase = Phase::Computed;
            let values = aggregate(host, s, &batch)?;
            let reply = Message::HostAggregate(HostAggregate {
                first_tree: batch.first_tree,
                tree_count: batch.tree_count() as u32,
                sample_ids: batch.sample_ids,
                values,
            });
            s.send(ep, GUEST, &reply)?;
            s.phase = Phase::Synchronized;
        }
        (Mode::Chain, Message::GuestVectors(batch) | Message::ChainForward(batch)) if from == prev => {
            let expected_tag = if prev == GUEST {
                super::Tag::GuestVectors
            } else {
                super::Tag::ChainForward
            };
            if tag != expected_tag {
                return Err(ProtocolError::ChainRoute(format!("{tag} arrived from party {from}")));
            }
            s.phase = Phase::Computed;
            let reply = if next == GUEST {
                let values = aggregate(host, s, &batch)?;
                Message::HostAggregate(HostAggregate {
                    first_tree: batch.first_tree,
                    tree_count: batch.tree_count() as u32,
                    sample_ids: batch.sample_ids,
                    values,
                })
            } else {
                Message::ChainForward(forward(host, s, &batch)?)
            };
            s.send(ep, next, &reply)?;
            s.phase = Phase::Synchronized;
        }
        (Mode::Chain, Message::GuestVectors(_) | Message::ChainForward(_)) => {
            return Err(ProtocolError::ChainRoute(format!(
                "party {} expected vectors from {prev}, got them from {from}",
                host.party()
            )));
        }
        (Mode::Baseline, Message::SplitQuery(q)) if from == GUEST => {
            let go_left = answer(host, &q)?;
            s.send(ep, GUEST, &Message::SplitAnswer(SplitAnswer { go_left }))?;
        }
        (_, Message::Abort(a)) => {
            return Err(ProtocolError::Aborted {
                party: from,
                code: a.code,
                reason: a.reason,
            })
        }
        _ => {
            return Err(ProtocolError::Unexpected {
                from,
                tag,
                expected: "a request matching the session mode",
            })
        }
    }
    Ok(())
}

/// The guest's vector for (sample, tree) as ciphertexts under the session key.
fn entries(s: &HostSession, batch: &VectorBatch, sample: usize, tree: usize) -> Result<Vec<Ciphertext>, ProtocolError> {
    let start = batch.vector_start(sample, tree);
    (start..start + batch.leaf_counts[tree] as usize)
        .map(|i| Ok(Ciphertext::from_parts(&s.public_key, batch.entries.value(i))?))
        .collect()
}

/// Calls `f(sample index, local tree index, global tree index, mask)` for every
/// (sample, tree) pair of the batch.
fn for_each_mask<F>(host: &HostParty, batch: &VectorBatch, mut f: F) -> Result<(), ProtocolError>
where
    F: FnMut(usize, usize, crate::engine::HostDecisionVector) -> Result<(), ProtocolError>,
{
    for (i, &id) in batch.sample_ids.iter().enumerate() {
        let row = host.table.row_of(id).ok_or(ProtocolError::UnknownSample(id))?;
        for t in 0..batch.tree_count() {
            let k = batch.first_tree as usize + t;
            let view = host
                .sub
                .trees
                .get(k)
                .filter(|v| v.leaf_count == batch.leaf_counts[t] as usize)
                .ok_or_else(|| ProtocolError::Config(format!("tree {k} does not match the local model")))?;
            let c = candidate_set(view, host.party(), |f| host.table.value(row, f))?;
            f(i, t, host_decision_vector(&c, view.leaf_count))?;
        }
    }
    Ok(())
}

/// q per sample: the masked inner products summed over the batch's trees.
fn aggregate(host: &HostParty, s: &HostSession, batch: &VectorBatch) -> Result<CipherList, ProtocolError> {
    let mut out = CipherList::with_capacity(s.public_key.ciphertext_bytes(), batch.sample_ids.len());
    let mut per_tree = Vec::with_capacity(batch.tree_count());
    for_each_mask(host, batch, |i, t, mask| {
        per_tree.push(intersect_inner_product(&s.public_key, &entries(s, batch, i, t)?, &mask)?);
        if t + 1 == batch.tree_count() {
            out.push(&aggregate_trees(&s.public_key, &per_tree)?);
            per_tree.clear();
        }
        Ok(())
    })?;
    Ok(out)
}

/// Same layout as the input with pruned entries replaced and survivors rerandomized.
fn forward(host: &HostParty, s: &HostSession, batch: &VectorBatch) -> Result<VectorBatch, ProtocolError> {
    let encryptor = host.encryptor_for(&s.public_key);
    let mut out = VectorBatch::new(
        batch.sample_ids.clone(),
        batch.first_tree,
        batch.leaf_counts.clone(),
        s.public_key.ciphertext_bytes(),
    );
    for_each_mask(host, batch, |i, t, mask| {
        for c in chain_filter(&encryptor, &entries(s, batch, i, t)?, &mask)? {
            out.entries.push(&c);
        }
        Ok(())
    })?;
    Ok(out)
}

fn answer(host: &HostParty, q: &SplitQuery) -> Result<bool, ProtocolError> {
    let unknown = ProtocolError::UnknownNode {
        tree: q.tree,
        node: q.node,
    };
    let view = host.sub.trees.get(q.tree as usize).ok_or(unknown.clone())?;
    match view.nodes.get(q.node as usize) {
        Some(&ViewNode::Owned { feature, threshold, .. }) => {
            let row = host
                .table
                .row_of(q.sample_id)
                .ok_or(ProtocolError::UnknownSample(q.sample_id))?;
            let x = host
                .table
                .value(row, feature)
                .ok_or(crate::model::ModelError::MissingFeature { feature })?;
            Ok(x < threshold)
        }
        _ => Err(unknown),
    }
}
