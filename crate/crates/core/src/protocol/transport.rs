//! Message delivery between parties.
//!
//! Endpoints exchange encoded frames. The in-memory network delivers them over
//! channels and injects a fixed one-way latency per message, either by
//! sleeping or on a per-party virtual clock. Under the virtual clock each
//! party's time advances by the real time it spends computing, and a received
//! message moves the receiver's clock forward to the message's arrival time
//! (send time plus latency). The TCP endpoint carries identical frames over
//! sockets and always runs in real time.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::wire::{Tag, HEADER_LEN};
use crate::model::PartyId;

/// Frames larger than this are refused by the socket reader.
const MAX_FRAME_BYTES: usize = 1 << 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("party {0} is unreachable")]
    Unreachable(PartyId),
    #[error("party {0} disconnected")]
    Disconnected(PartyId),
    #[error("no message from party {from} within {waited:?}")]
    Timeout { from: PartyId, waited: Duration },
    #[error("socket error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// Account latency on virtual clocks; runs at full speed.
    Simulated,
    /// Hold every message for the latency in real time.
    Sleep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinkConfig {
    /// One-way delay added to every message.
    pub latency: Duration,
    pub mode: LatencyMode,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            latency: Duration::from_millis(10),
            mode: LatencyMode::Simulated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub from: PartyId,
    pub to: PartyId,
    pub tag: Tag,
    pub seq: u64,
    /// Whole frame, length field included.
    pub bytes: usize,
    /// Sender's clock at send time.
    pub at: Duration,
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// Ordered log of every frame sent during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ProtocolTrace {
    pub events: Vec<TraceEvent>,
    /// Raw frames, only when capture was requested.
    #[serde(skip)]
    pub frames: Vec<Vec<u8>>,
}

impl ProtocolTrace {
    pub fn message_count(&self) -> usize {
        self.events.len()
    }

    pub fn total_bytes(&self) -> usize {
        self.events.iter().map(|e| e.bytes).sum()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.events.iter().filter(|e| e.tag == tag).count()
    }

    /// Messages after session setup.
    pub fn protocol_messages(&self) -> usize {
        self.events.iter().filter(|e| e.tag != Tag::Setup).count()
    }

    pub fn between(&self, from: PartyId, to: PartyId) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.from == from && e.to == to)
    }

    /// One line per message: direction, variant, bytes, timestamp.
    pub fn log_lines(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| {
                format!(
                    "{}->{} {} {} bytes at {:.3} ms (seq {})",
                    e.from,
                    e.to,
                    e.tag,
                    e.bytes,
                    e.at.as_secs_f64() * 1e3,
                    e.seq
                )
            })
            .collect()
    }
}

/// Shared sink for trace events from every endpoint of one network.
#[derive(Clone, Default)]
pub struct TraceRecorder {
    inner: Arc<Mutex<ProtocolTrace>>,
    capture: bool,
}

impl TraceRecorder {
    pub fn new(capture_frames: bool) -> Self {
        TraceRecorder {
            inner: Arc::default(),
            capture: capture_frames,
        }
    }

    fn record(&self, from: PartyId, to: PartyId, frame: &[u8], at: Duration) {
        let tag = Tag::from_u8(frame[4]).expect("endpoints only send encoded frames");
        let seq = u64::from_be_bytes(frame[21..29].try_into().unwrap());
        let mut t = self.inner.lock().unwrap();
        t.events.push(TraceEvent {
            from,
            to,
            tag,
            seq,
            bytes: frame.len(),
            at,
        });
        if self.capture {
            t.frames.push(frame.to_vec());
        }
    }

    /// Everything recorded since the last take.
    pub fn take(&self) -> ProtocolTrace {
        std::mem::take(&mut *self.inner.lock().unwrap())
    }
}

enum Envelope {
    Frame { bytes: Vec<u8>, arrives: Duration },
    Closed,
}

type Inbox = Receiver<(PartyId, Envelope)>;

enum Outbound {
    Memory(Vec<Option<Sender<(PartyId, Envelope)>>>),
    Tcp {
        addrs: Vec<SocketAddr>,
        streams: HashMap<PartyId, TcpStream>,
        connect_timeout: Duration,
    },
}

pub enum Delivery {
    Frame(PartyId, Vec<u8>),
    Closed(PartyId),
}

/// One party's connection to the others.
pub struct Endpoint {
    party: PartyId,
    outbound: Outbound,
    inbox: Inbox,
    pending: VecDeque<(PartyId, Envelope)>,
    link: LinkConfig,
    epoch: Instant,
    now: Duration,
    mark: Instant,
    recorder: TraceRecorder,
}

/// Fully connected in-process network of `parties` endpoints.
pub fn memory_network(parties: usize, link: LinkConfig, recorder: &TraceRecorder) -> Vec<Endpoint> {
    let (senders, inboxes): (Vec<_>, Vec<_>) = (0..parties).map(|_| channel()).unzip();
    let epoch = Instant::now();
    inboxes
        .into_iter()
        .enumerate()
        .map(|(party, inbox)| Endpoint {
            party,
            outbound: Outbound::Memory(
                senders
                    .iter()
                    .enumerate()
                    .map(|(p, s)| (p != party).then(|| s.clone()))
                    .collect(),
            ),
            inbox,
            pending: VecDeque::new(),
            link,
            epoch,
            now: Duration::ZERO,
            mark: epoch,
            recorder: recorder.clone(),
        })
        .collect()
}

impl Endpoint {
    pub fn party(&self) -> PartyId {
        self.party
    }

    /// Current time on this party's clock.
    pub fn now(&mut self) -> Duration {
        match self.link.mode {
            LatencyMode::Simulated => {
                let t = Instant::now();
                self.now += t - self.mark;
                self.mark = t;
                self.now
            }
            LatencyMode::Sleep => self.epoch.elapsed(),
        }
    }

    pub fn send(&mut self, to: PartyId, frame: Vec<u8>) -> Result<(), TransportError> {
        debug_assert!(frame.len() >= HEADER_LEN);
        let at = self.now();
        let arrives = at + self.link.latency;
        self.recorder.record(self.party, to, &frame, at);
        let from = self.party;
        match &mut self.outbound {
            Outbound::Memory(senders) => {
                let tx = senders
                    .get(to)
                    .and_then(|s| s.as_ref())
                    .ok_or(TransportError::Unreachable(to))?;
                tx.send((from, Envelope::Frame { bytes: frame, arrives }))
                    .map_err(|_| TransportError::Unreachable(to))
            }
            Outbound::Tcp {
                addrs,
                streams,
                connect_timeout,
            } => {
                if !self.link.latency.is_zero() {
                    std::thread::sleep(self.link.latency);
                }
                let stream = match streams.entry(to) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(v) => {
                        let addr = *addrs.get(to).ok_or(TransportError::Unreachable(to))?;
                        v.insert(connect(from, addr, *connect_timeout).map_err(|_| TransportError::Unreachable(to))?)
                    }
                };
                stream
                    .write_all(&frame)
                    .map_err(|e| TransportError::Io(e.to_string()))
            }
        }
    }

    fn accept(&mut self, from: PartyId, env: Envelope) -> Delivery {
        match env {
            Envelope::Frame { bytes, arrives } => {
                match self.link.mode {
                    LatencyMode::Simulated => {
                        // time spent blocked is not compute; jump to the arrival
                        self.mark = Instant::now();
                        self.now = self.now.max(arrives);
                    }
                    LatencyMode::Sleep => {
                        if let Outbound::Memory(_) = self.outbound {
                            let due = self.epoch + arrives;
                            let now = Instant::now();
                            if due > now {
                                std::thread::sleep(due - now);
                            }
                        }
                    }
                }
                Delivery::Frame(from, bytes)
            }
            Envelope::Closed => Delivery::Closed(from),
        }
    }

    fn next(&mut self, timeout: Option<Duration>, waiting_on: PartyId) -> Result<(PartyId, Envelope), TransportError> {
        self.now();
        match timeout {
            None => self.inbox.recv().map_err(|_| TransportError::Disconnected(waiting_on)),
            Some(t) => self.inbox.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout {
                    from: waiting_on,
                    waited: t,
                },
                RecvTimeoutError::Disconnected => TransportError::Disconnected(waiting_on),
            }),
        }
    }

    /// Next frame from `from`; frames from other parties are queued.
    pub fn recv_from(&mut self, from: PartyId, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        if let Some(i) = self.pending.iter().position(|(p, _)| *p == from) {
            let (p, env) = self.pending.remove(i).unwrap();
            return match self.accept(p, env) {
                Delivery::Frame(_, bytes) => Ok(bytes),
                Delivery::Closed(p) => Err(TransportError::Disconnected(p)),
            };
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let left = deadline.map(|d| d.saturating_duration_since(Instant::now()));
            let (p, env) = self.next(left, from).map_err(|e| match e {
                TransportError::Timeout { from, .. } => TransportError::Timeout {
                    from,
                    waited: timeout.unwrap_or_default(),
                },
                other => other,
            })?;
            if p == from {
                return match self.accept(p, env) {
                    Delivery::Frame(_, bytes) => Ok(bytes),
                    Delivery::Closed(p) => Err(TransportError::Disconnected(p)),
                };
            }
            self.pending.push_back((p, env));
        }
    }

    /// Next frame or close notice from anyone.
    pub fn recv_any(&mut self, timeout: Option<Duration>) -> Result<Delivery, TransportError> {
        let (p, env) = match self.pending.pop_front() {
            Some(x) => x,
            None => self.next(timeout, self.party)?,
        };
        Ok(self.accept(p, env))
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        if let Outbound::Memory(senders) = &self.outbound {
            for tx in senders.iter().flatten() {
                let _ = tx.send((self.party, Envelope::Closed));
            }
        }
    }
}

fn connect(from: PartyId, addr: SocketAddr, timeout: Duration) -> std::io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(mut s) => {
                s.set_nodelay(true)?;
                s.write_all(&(from as u16).to_be_bytes())?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn read_frames(mut stream: TcpStream, tx: Sender<(PartyId, Envelope)>) {
    let mut hello = [0u8; 2];
    if stream.read_exact(&mut hello).is_err() {
        return;
    }
    let from = u16::from_be_bytes(hello) as PartyId;
    loop {
        let mut prefix = [0u8; 4];
        if stream.read_exact(&mut prefix).is_err() {
            break;
        }
        let len = super::wire::frame_body_len(prefix);
        if len > MAX_FRAME_BYTES || len + 4 < HEADER_LEN {
            log::warn!("dropping connection from party {from}: frame length {len}");
            break;
        }
        let mut frame = vec![0u8; 4 + len];
        frame[..4].copy_from_slice(&prefix);
        if stream.read_exact(&mut frame[4..]).is_err() {
            break;
        }
        let env = Envelope::Frame {
            bytes: frame,
            arrives: Duration::ZERO,
        };
        if tx.send((from, env)).is_err() {
            return;
        }
    }
    let _ = tx.send((from, Envelope::Closed));
}

/// Endpoint for a party listening on `listener`; `addrs[p]` is where party
/// `p` listens. Latency, if any, is slept before each send.
pub fn tcp_endpoint(
    party: PartyId,
    listener: TcpListener,
    addrs: Vec<SocketAddr>,
    latency: Duration,
    recorder: &TraceRecorder,
) -> Endpoint {
    let (tx, inbox) = channel();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let tx = tx.clone();
            std::thread::spawn(move || read_frames(stream, tx));
        }
    });
    let epoch = Instant::now();
    Endpoint {
        party,
        outbound: Outbound::Tcp {
            addrs,
            streams: HashMap::new(),
            connect_timeout: Duration::from_secs(10),
        },
        inbox,
        pending: VecDeque::new(),
        link: LinkConfig {
            latency,
            mode: LatencyMode::Sleep,
        },
        epoch,
        now: Duration::ZERO,
        mark: epoch,
        recorder: recorder.clone(),
    }
}
