//! Services on top of communities: windowed file transfer, and the flooding
//! baseline used to measure what communities save.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fabric::Layer;
use crate::model::{Body, CommunityId, Destination, Digest, MachineId, NodeId, PacketEnvelope, PacketKind};
use crate::scenario::World;
use crate::sim::metrics::Outcome;
use crate::sim::queue::Timer;
use crate::sim::time::SimTime;
use crate::sim::{run, Mode, Report, RunOptions, Simulation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("{node} hosts no file {file:?}")]
    NoSuchFile { node: NodeId, file: String },
    #[error("{node} has no member of {cid} to talk to")]
    NotInCommunity { node: NodeId, cid: CommunityId },
    #[error("session {0} exhausted its retries")]
    TransferFailed(u64),
}

/// A file split into fixed-size chunks. An empty file is one empty chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct FileObject {
    pub name: String,
    pub content: Arc<Vec<u8>>,
    pub chunk_size: u64,
}

impl FileObject {
    pub fn new(name: impl Into<String>, content: Arc<Vec<u8>>, chunk_size: u64) -> Self {
        FileObject {
            name: name.into(),
            content,
            chunk_size: chunk_size.max(1),
        }
    }

    pub fn chunk_count(&self) -> u64 {
        (self.content.len() as u64).div_ceil(self.chunk_size).max(1)
    }

    pub fn chunk(&self, seq: u64) -> &[u8] {
        let start = (seq * self.chunk_size).min(self.content.len() as u64) as usize;
        let end = ((seq + 1) * self.chunk_size).min(self.content.len() as u64) as usize;
        &self.content[start..end]
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.content)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Requested,
    Streaming,
    Complete,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Complete | SessionState::Failed)
    }
}

/// One file transfer. The server streams a window of chunks, each with its
/// own retransmission timer; the requester hands chunks up strictly in order.
#[derive(Clone, Debug)]
pub struct TransferSession {
    pub id: u64,
    pub cid: CommunityId,
    pub requester: MachineId,
    pub server: MachineId,
    pub file: Option<FileObject>,
    pub file_name: String,
    pub state: SessionState,
    pub failure: Option<String>,
    pub window: u64,
    pub retries: u32,
    pub rto: SimTime,
    pub next_unsent: u64,
    pub outstanding: BTreeSet<u64>,
    pub acked: BTreeSet<u64>,
    pub buffer: BTreeMap<u64, Vec<u8>>,
    pub next_expected: u64,
    pub received: Vec<u8>,
    pub retransmissions: u64,
    pub started: SimTime,
    pub finished: Option<SimTime>,
}

impl TransferSession {
    pub fn total_chunks(&self) -> u64 {
        self.file.as_ref().map_or(0, FileObject::chunk_count)
    }

    pub fn received_digest(&self) -> Digest {
        Digest::of(&self.received)
    }

    pub(crate) fn report(&self, _world: &World) -> SessionReport {
        SessionReport {
            id: self.id,
            cid: self.cid.to_string(),
            requester: self.requester.to_string(),
            server: self.server.to_string(),
            file: self.file_name.clone(),
            state: self.state,
            failure: self.failure.clone(),
            total_chunks: self.total_chunks(),
            acked: self.acked.len() as u64,
            retransmissions: self.retransmissions,
            bytes_received: self.received.len() as u64,
            origin_digest: self.file.as_ref().map(|f| f.digest().to_hex()),
            received_digest: (self.state == SessionState::Complete).then(|| self.received_digest().to_hex()),
            started_ticks: self.started.ticks(),
            finished_ticks: self.finished.map(SimTime::ticks),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SessionReport {
    pub id: u64,
    pub cid: String,
    pub requester: String,
    pub server: String,
    pub file: String,
    pub state: SessionState,
    pub failure: Option<String>,
    pub total_chunks: u64,
    pub acked: u64,
    pub retransmissions: u64,
    pub bytes_received: u64,
    pub origin_digest: Option<String>,
    pub received_digest: Option<String>,
    pub started_ticks: u64,
    pub finished_ticks: Option<u64>,
}

const FILE_REQ: &str = "FILE_REQ";
const FILE_CHUNK: &str = "FILE_CHUNK";
const FILE_ACK: &str = "FILE_ACK";

impl Simulation {
    /// Asks the member on `server` for `file`. Returns the session id.
    pub fn ftp_request(
        &mut self,
        requester: usize,
        server: usize,
        cid: &CommunityId,
        file: &str,
    ) -> Result<u64, ServiceError> {
        let not_in = |s: &Self, n: usize| ServiceError::NotInCommunity {
            node: s.node_id(n),
            cid: cid.clone(),
        };
        let m = self.membership(requester, cid).ok_or_else(|| not_in(self, requester))?;
        let server_mid = m
            .view
            .member_on(&self.node_id(server))
            .ok_or_else(|| not_in(self, server))?;
        let requester_mid = m.machine.clone();
        let culture = m.view.culture.name().to_string();
        let transport = self.world.registry.culture_art(&culture, Layer::Transport);
        let param = |k: &str, d: f64| transport.and_then(|a| a.param(k)).unwrap_or(d);
        let window = param("window", 4.0).max(1.0) as u64;
        let retries = param("retries", 8.0).max(1.0) as u32;
        let rto = SimTime::from_units(param("rto", 10.0));
        let chunk_size = self
            .world
            .params
            .chunk_size
            .unwrap_or(param("chunk_size", 1024.0) as u64);
        let hosted = self
            .world
            .file(server, file)
            .map(|f| FileObject::new(file, f.content.clone(), chunk_size));
        let id = self.sessions.len() as u64;
        let missing = hosted.is_none();
        self.sessions.push(TransferSession {
            id,
            cid: cid.clone(),
            requester: requester_mid.clone(),
            server: server_mid.clone(),
            file: hosted,
            file_name: file.to_string(),
            state: SessionState::Requested,
            failure: None,
            window,
            retries,
            rto,
            next_unsent: 0,
            outstanding: BTreeSet::new(),
            acked: BTreeSet::new(),
            buffer: BTreeMap::new(),
            next_expected: 0,
            received: Vec::new(),
            retransmissions: 0,
            started: self.now,
            finished: None,
        });
        if missing {
            self.fail_session(id, "NoSuchFile");
            return Err(ServiceError::NoSuchFile {
                node: self.node_id(server),
                file: file.to_string(),
            });
        }
        self.trace_ev(
            requester,
            "FTP_REQUEST",
            None,
            vec![("session", id.to_string()), ("file", file.to_string())],
        );
        self.send_file_request(id, 1);
        Ok(id)
    }

    fn send_file_request(&mut self, id: u64, attempt: u32) {
        let s = &self.sessions[id as usize];
        let (node, cid, dest, name, rto) = (
            s.requester.node.idx(),
            s.cid.clone(),
            s.server.clone(),
            s.file_name.clone(),
            s.rto,
        );
        let bytes = name.len() as u64;
        if self
            .send_data(node, &cid, &dest, FILE_REQ, name.into_bytes(), bytes, None, Some(id))
            .is_err()
        {
            self.fail_session(id, "NotInCommunity");
            return;
        }
        self.schedule_at(self.now + rto, node, Timer::RequestTimeout { session: id, attempt });
    }

    fn send_chunk(&mut self, id: u64, seq: u64, attempt: u32) {
        let s = &self.sessions[id as usize];
        let file = s.file.as_ref().expect("streaming sessions have a file");
        let payload = file.chunk(seq).to_vec();
        let (node, cid, dest, rto) = (s.server.node.idx(), s.cid.clone(), s.requester.clone(), s.rto);
        let bytes = payload.len() as u64;
        if self
            .send_data(node, &cid, &dest, FILE_CHUNK, payload, bytes, Some(seq), Some(id))
            .is_err()
        {
            self.fail_session(id, "NotInCommunity");
            return;
        }
        self.sessions[id as usize].outstanding.insert(seq);
        self.schedule_at(
            self.now + rto,
            node,
            Timer::ChunkTimeout {
                session: id,
                seq,
                attempt,
            },
        );
    }

    fn fill_window(&mut self, id: u64) {
        loop {
            let s = &mut self.sessions[id as usize];
            if s.state.is_terminal() || s.outstanding.len() as u64 >= s.window || s.next_unsent >= s.total_chunks() {
                return;
            }
            let seq = s.next_unsent;
            s.next_unsent += 1;
            self.send_chunk(id, seq, 1);
        }
    }

    fn fail_session(&mut self, id: u64, reason: &str) {
        let now = self.now;
        let s = &mut self.sessions[id as usize];
        if s.state.is_terminal() {
            return;
        }
        s.state = SessionState::Failed;
        s.failure = Some(reason.to_string());
        s.finished = Some(now);
        let node = s.requester.node.idx();
        self.trace_ev(
            node,
            "FTP_FAIL",
            None,
            vec![("session", id.to_string()), ("reason", reason.to_string())],
        );
    }

    /// An accepted file-service packet at its destination machine.
    pub(crate) fn on_session_packet(&mut self, node: usize, id: u64, pkt: &PacketEnvelope) {
        let Some(s) = self.sessions.get(id as usize) else {
            return;
        };
        if s.state.is_terminal() {
            return;
        }
        match pkt.op_code.as_str() {
            FILE_REQ if node == s.server.node.idx() => {
                if s.state == SessionState::Requested {
                    self.sessions[id as usize].state = SessionState::Streaming;
                    self.fill_window(id);
                }
            }
            FILE_CHUNK if node == s.requester.node.idx() => {
                let Some(seq) = pkt.seq else { return };
                let s = &mut self.sessions[id as usize];
                if seq >= s.next_expected {
                    s.buffer.entry(seq).or_insert_with(|| pkt.payload.clone());
                }
                while let Some(chunk) = s.buffer.remove(&s.next_expected) {
                    s.received.extend_from_slice(&chunk);
                    s.next_expected += 1;
                }
                if s.buffer.keys().any(|k| *k < s.next_expected) {
                    self.metrics.order_violations += 1;
                }
                let (cid, dest) = (s.cid.clone(), s.server.clone());
                let _ = self.send_data(node, &cid, &dest, FILE_ACK, Vec::new(), 0, Some(seq), Some(id));
            }
            FILE_ACK if node == s.server.node.idx() => {
                let Some(seq) = pkt.seq else { return };
                let s = &mut self.sessions[id as usize];
                s.outstanding.remove(&seq);
                s.acked.insert(seq);
                if s.acked.len() as u64 == s.total_chunks() {
                    let ok = s.next_expected == s.total_chunks()
                        && s.file.as_ref().is_some_and(|f| f.digest() == Digest::of(&s.received));
                    if ok {
                        s.state = SessionState::Complete;
                        s.finished = Some(self.now);
                        let node = s.requester.node.idx();
                        let digest = s.received_digest().to_hex();
                        self.trace_ev(
                            node,
                            "FTP_COMPLETE",
                            None,
                            vec![("session", id.to_string()), ("digest", digest)],
                        );
                    } else {
                        self.fail_session(id, "DigestMismatch");
                    }
                } else {
                    self.fill_window(id);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn chunk_timeout(&mut self, id: u64, seq: u64, attempt: u32) {
        let s = &self.sessions[id as usize];
        if s.state.is_terminal() || s.acked.contains(&seq) {
            return;
        }
        if attempt >= s.retries {
            self.fail_session(id, "TransferFailed");
            return;
        }
        self.sessions[id as usize].retransmissions += 1;
        self.metrics.retransmissions += 1;
        self.send_chunk(id, seq, attempt + 1);
    }

    pub(crate) fn request_timeout(&mut self, id: u64, attempt: u32) {
        let s = &self.sessions[id as usize];
        if s.state != SessionState::Requested {
            return;
        }
        if attempt >= s.retries {
            self.fail_session(id, "TransferFailed");
            return;
        }
        self.sessions[id as usize].retransmissions += 1;
        self.metrics.retransmissions += 1;
        self.send_file_request(id, attempt + 1);
    }

    /// Baseline: floods one message to every node, with duplicate suppression.
    pub fn flood_send(&mut self, from: usize, to: usize, bytes: u64) -> u64 {
        let mut pkt = self.new_packet(PacketKind::Data, from, Destination::Broadcast);
        pkt.op_code = "FLOOD".into();
        pkt.payload_bytes = bytes;
        pkt.body = Body::Data {
            dest_machine: None,
            target: Some(self.node_id(to)),
            session: None,
        };
        let id = pkt.packet_id;
        self.register_send(id);
        self.trace_ev(
            from,
            "SEND",
            Some(id),
            vec![("dst", self.node_id(to).to_string()), ("op", "FLOOD".into())],
        );
        if from == to {
            self.settle(id, Outcome::Delivered, bytes);
        }
        self.broadcast(from, pkt);
        id
    }

    pub(crate) fn on_flood_data(&mut self, node: usize, pkt: PacketEnvelope) {
        if let Body::Data { target: Some(t), .. } = &pkt.body {
            if t.idx() == node {
                self.trace_ev(
                    node,
                    "DELIVER",
                    Some(pkt.packet_id),
                    vec![("op", "FLOOD".into()), ("hops", (pkt.hop_trace.len() - 1).to_string())],
                );
                self.settle(pkt.packet_id, Outcome::Delivered, pkt.payload_bytes);
            }
        }
        self.rebroadcast(node, pkt);
    }
}

/// Transmission totals for one message count.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ComparePoint {
    pub k: u32,
    pub hamanet_total: u64,
    pub hamanet_control: u64,
    pub hamanet_data: u64,
    pub baseline_total: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub scenario: String,
    pub seed: u64,
    pub k_max: u32,
    pub hamanet: Report,
    pub baseline: Report,
    pub scan: Vec<ComparePoint>,
    /// Whether communities beat flooding on the scenario's own workload.
    pub hamanet_wins: bool,
    /// Smallest message count at which communities send strictly fewer
    /// transmissions than flooding.
    pub crossover: Option<u32>,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Runs the scenario under communities and under flooding, then scans the
/// mirrored message count from 1 to `k_max`. Neighbor beacons are disabled in
/// both modes so only protocol traffic is compared.
pub fn compare_overhead(world: &World, seed: u64, k_max: u32) -> CompareReport {
    let opts = |mode, messages| RunOptions {
        mode,
        hello: Some(false),
        messages,
    };
    let hamanet = run(world, seed, opts(Mode::Hamanet, None)).report;
    let baseline = run(world, seed, opts(Mode::Baseline, None)).report;
    let scan: Vec<ComparePoint> = (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let h = run(world, seed, opts(Mode::Hamanet, Some(k))).report.metrics;
            let b = run(world, seed, opts(Mode::Baseline, Some(k))).report.metrics;
            ComparePoint {
                k,
                hamanet_total: h.total_tx,
                hamanet_control: h.control_total(),
                hamanet_data: h.data_tx,
                baseline_total: b.total_tx,
            }
        })
        .collect();
    let hamanet_wins = hamanet.metrics.total_tx < baseline.metrics.total_tx;
    let crossover = scan.iter().find(|p| p.hamanet_total < p.baseline_total).map(|p| p.k);
    CompareReport {
        scenario: world.name.clone(),
        seed,
        k_max,
        hamanet,
        baseline,
        scan,
        hamanet_wins,
        crossover,
    }
}
