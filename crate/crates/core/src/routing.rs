//! Intra-community routing: table lookup, on-demand discovery (`RREQ` /
//! `RREP`), route errors, neighbor beacons and relay through non-members.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::community::better_path;
use crate::model::{Body, CommunityId, Destination, MachineId, NodeId, PacketEnvelope, PacketKind, Path};
use crate::sim::metrics::DropReason;
use crate::sim::queue::Timer;
use crate::sim::time::SimTime;
use crate::sim::Simulation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("{node} is not a member of {cid}")]
    NotAMember { node: NodeId, cid: CommunityId },
    #[error("{0} has no neighbors to relay through")]
    NoFriendAvailable(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Machine(MachineId),
    AnyMember,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Machine(m) => write!(f, "{m}"),
            Target::AnyMember => f.write_str("*"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteRequest {
    pub rreq_id: u64,
    pub cid: CommunityId,
    pub origin: MachineId,
    pub target: Target,
}

/// A responder's table, offered to the requester. Paths start at the responder.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteReply {
    pub rreq_id: u64,
    pub responder: MachineId,
    pub rows: Vec<(MachineId, Path)>,
}

/// Periodic one-hop announcement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HelloBeacon {
    pub cids: BTreeSet<CommunityId>,
    /// Communities some neighbor of the sender belongs to.
    pub member_neighbors: BTreeSet<CommunityId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborEntry {
    pub last_heard: SimTime,
    pub cids: BTreeSet<CommunityId>,
    pub member_neighbors: BTreeSet<CommunityId>,
}

/// Neighbors a node has heard from, with what they advertised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborSet {
    entries: BTreeMap<NodeId, NeighborEntry>,
}

impl NeighborSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Any reception refreshes the entry.
    pub fn heard(&mut self, n: &NodeId, t: SimTime) {
        self.entries
            .entry(n.clone())
            .and_modify(|e| e.last_heard = t)
            .or_insert_with(|| NeighborEntry {
                last_heard: t,
                cids: BTreeSet::new(),
                member_neighbors: BTreeSet::new(),
            });
    }

    pub fn hello(&mut self, n: &NodeId, t: SimTime, beacon: &HelloBeacon) {
        self.entries.insert(
            n.clone(),
            NeighborEntry {
                last_heard: t,
                cids: beacon.cids.clone(),
                member_neighbors: beacon.member_neighbors.clone(),
            },
        );
    }

    pub fn remove(&mut self, n: &NodeId) -> bool {
        self.entries.remove(n).is_some()
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.entries.contains_key(n)
    }

    pub fn get(&self, n: &NodeId) -> Option<&NeighborEntry> {
        self.entries.get(n)
    }

    /// Entries silent for longer than `timeout` at `now`.
    pub fn expired(&self, now: SimTime, timeout: SimTime) -> Vec<NodeId> {
        self.entries
            .iter()
            .filter(|(_, e)| now - e.last_heard > timeout)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &NeighborEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lowest-index neighbor advertising membership in `cid`.
    pub fn member_for(&self, cid: &CommunityId, skip: &[NodeId]) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(n, e)| e.cids.contains(cid) && !skip.contains(n))
            .map(|(n, _)| n.clone())
    }

    /// Lowest-index neighbor that advertises a member neighbor in `cid`.
    pub fn advertiser_for(&self, cid: &CommunityId, skip: &[NodeId]) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(n, e)| e.member_neighbors.contains(cid) && !skip.contains(n))
            .map(|(n, _)| n.clone())
    }
}

/// An outstanding route request held by its origin.
#[derive(Clone, Debug)]
pub(crate) struct PendingRequest {
    pub cid: CommunityId,
    pub target: MachineId,
    pub satisfied: bool,
    pub queued: Vec<PacketEnvelope>,
}

impl Simulation {
    /// Current row from the node's table for `dest`.
    pub fn lookup_path(&self, node: usize, cid: &CommunityId, dest: &MachineId) -> Result<Option<Path>, RoutingError> {
        let m = self.membership(node, cid).ok_or_else(|| RoutingError::NotAMember {
            node: self.node_id(node),
            cid: cid.clone(),
        })?;
        Ok(m.table.get(dest).cloned())
    }

    /// Sends application data from the member machine on `node` to `dest`.
    /// Returns the packet id; the outcome is settled later.
    #[allow(clippy::too_many_arguments)]
    pub fn send_data(
        &mut self,
        node: usize,
        cid: &CommunityId,
        dest: &MachineId,
        op: &str,
        payload: Vec<u8>,
        payload_bytes: u64,
        seq: Option<u64>,
        session: Option<u64>,
    ) -> Result<u64, RoutingError> {
        let Some(m) = self.membership(node, cid) else {
            return Err(RoutingError::NotAMember {
                node: self.node_id(node),
                cid: cid.clone(),
            });
        };
        let origin = m.machine.clone();
        let mut pkt = self.new_packet(PacketKind::Data, node, Destination::Node(dest.node.clone()));
        pkt.op_code = op.to_string();
        pkt.cid = Some(cid.clone());
        pkt.origin_machine = Some(origin);
        pkt.payload_bytes = payload_bytes;
        pkt.payload = payload;
        pkt.seq = seq;
        pkt.body = Body::Data {
            dest_machine: Some(dest.clone()),
            target: None,
            session,
        };
        let id = pkt.packet_id;
        self.register_send(id);
        self.trace_ev(
            node,
            "SEND",
            Some(id),
            vec![
                ("cid", cid.to_string()),
                ("dst", dest.to_string()),
                ("op", pkt.op_code.clone()),
            ],
        );
        self.route_data(node, pkt, dest.clone());
        Ok(id)
    }

    /// Routes a data packet that starts at `node`.
    fn route_data(&mut self, node: usize, mut pkt: PacketEnvelope, dest: MachineId) {
        if dest.node.idx() == node {
            self.on_data(node, pkt);
            return;
        }
        let cid = pkt.cid.clone().expect("community data");
        let m = self.membership(node, &cid).expect("caller checked membership");
        match m.table.get(&dest).cloned() {
            Some(path) => {
                self.note_route_use(node, &cid, &path);
                pkt.route = Some(path);
                self.send_unicast(node, pkt);
            }
            None if m.table.is_empty() => {
                let id = pkt.packet_id;
                match self.send_friend(node, pkt) {
                    Ok(()) => {
                        let deadline = self.now + self.world.params.rreq_timeout;
                        self.schedule_at(deadline, node, Timer::FriendTimeout(id));
                    }
                    Err(e) => {
                        self.trace_ev(
                            node,
                            "DROP",
                            Some(id),
                            vec![
                                ("reason", "no_friend".into()),
                                ("err", crate::community::quote(&e.to_string())),
                            ],
                        );
                        self.settle_drop(id, DropReason::NoFriend);
                    }
                }
            }
            None => self.queue_for_route(node, pkt, dest),
        }
    }

    fn queue_for_route(&mut self, node: usize, pkt: PacketEnvelope, dest: MachineId) {
        let cid = pkt.cid.clone().expect("community data");
        let queued: usize = self.nodes[node]
            .rreqs
            .values()
            .filter(|r| r.cid == cid)
            .map(|r| r.queued.len())
            .sum();
        if queued >= self.world.params.queue_limit {
            self.trace_ev(
                node,
                "DROP",
                Some(pkt.packet_id),
                vec![("reason", "queue_overflow".into())],
            );
            self.settle_drop(pkt.packet_id, DropReason::QueueOverflow);
            return;
        }
        let open = self.nodes[node]
            .rreqs
            .iter_mut()
            .find(|(_, r)| !r.satisfied && r.cid == cid && r.target == dest);
        if let Some((_, r)) = open {
            r.queued.push(pkt);
            return;
        }
        let origin = self.membership(node, &cid).unwrap().machine.clone();
        let mut req = self.new_packet(PacketKind::Rreq, node, Destination::Broadcast);
        let rreq_id = req.packet_id;
        req.cid = Some(cid.clone());
        req.origin_machine = Some(origin.clone());
        req.body = Body::Request(RouteRequest {
            rreq_id,
            cid: cid.clone(),
            origin,
            target: Target::Machine(dest.clone()),
        });
        self.nodes[node].rreqs.insert(
            rreq_id,
            PendingRequest {
                cid,
                target: dest,
                satisfied: false,
                queued: vec![pkt],
            },
        );
        self.metrics.rreq_floods += 1;
        self.broadcast(node, req);
        let deadline = self.now + self.world.params.rreq_timeout;
        self.schedule_at(deadline, node, Timer::RreqTimeout(rreq_id));
    }

    /// First copy of an `RREQ` flood at `node`.
    pub(crate) fn on_rreq(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::Request(req) = &pkt.body else { return };
        let req = req.clone();
        if self.adversary_behavior(node) == Some(crate::sim::adversary::Behavior::BogusRrep) {
            self.bogus_reply(node, &pkt, &req);
            return;
        }
        let reply = self.membership(node, &req.cid).and_then(|m| {
            let can = match &req.target {
                Target::AnyMember => true,
                Target::Machine(t) => *t == m.machine || m.table.get(t).is_some(),
            };
            can.then(|| RouteReply {
                rreq_id: req.rreq_id,
                responder: m.machine.clone(),
                rows: m.table.iter().map(|(k, p)| (k.clone(), p.clone())).collect(),
            })
        });
        let Some(reply) = reply else {
            self.rebroadcast(node, pkt);
            return;
        };
        let mut rrep = self.new_packet(PacketKind::Rrep, node, Destination::Node(pkt.src.clone()));
        rrep.cid = Some(req.cid.clone());
        rrep.origin_machine = Some(reply.responder.clone());
        rrep.route = Some(pkt.travelled().reversed());
        rrep.body = Body::Reply(reply);
        self.send_unicast(node, rrep);
    }

    /// `RREP` that reached its destination.
    pub(crate) fn on_rrep(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::Reply(reply) = &pkt.body else { return };
        let reply = reply.clone();
        let Some(pending) = self.nodes[node].rreqs.get(&reply.rreq_id) else {
            self.metrics.stale_replies += 1;
            let reason = if self.nodes[node].expired_rreqs.contains(&reply.rreq_id) {
                "stale_reply"
            } else {
                "unknown_request"
            };
            self.trace_ev(
                node,
                "STALE_REPLY",
                Some(pkt.packet_id),
                vec![("reason", reason.into()), ("rreq", reply.rreq_id.to_string())],
            );
            return;
        };
        let cid = pending.cid.clone();
        let known_responder = pkt.cid.as_ref() == Some(&cid)
            && self
                .membership(node, &cid)
                .is_some_and(|m| m.view.contains(&reply.responder) && reply.responder.node == pkt.src);
        if !known_responder {
            self.metrics.rejected_replies += 1;
            self.trace_ev(
                node,
                "REPLY_REJECT",
                Some(pkt.packet_id),
                vec![("rreq", reply.rreq_id.to_string())],
            );
            return;
        }
        let me = self.node_id(node);
        let to_resp = pkt.travelled().reversed();
        let mut candidates = vec![(reply.responder.clone(), to_resp.clone())];
        for (mid, p) in &reply.rows {
            if mid.node != me && p.first() == to_resp.last() {
                candidates.push((mid.clone(), to_resp.splice(p)));
            }
        }
        let mut installed = Vec::new();
        let m = self.nodes[node].memberships.get_mut(&cid).unwrap();
        for (mid, path) in candidates {
            if mid.node == me || path.hop_count() == 0 || !m.view.contains(&mid) {
                continue;
            }
            if m.table.get(&mid).is_none_or(|old| better_path(&path, old))
                && m.table.insert(mid.clone(), path.clone()).is_ok()
            {
                m.known.add_path(&path);
                installed.push(path);
            }
        }
        for p in &installed {
            self.note_install(p);
        }
        self.trace_ev(
            node,
            "RREP_MERGE",
            Some(pkt.packet_id),
            vec![
                ("rreq", reply.rreq_id.to_string()),
                ("installed", installed.len().to_string()),
            ],
        );
        self.flush_queues(node, &cid);
    }

    /// Sends queued data for every request whose target now has a row.
    fn flush_queues(&mut self, node: usize, cid: &CommunityId) {
        let ready: Vec<u64> = self.nodes[node]
            .rreqs
            .iter()
            .filter(|(_, r)| !r.satisfied && &r.cid == cid)
            .filter(|(_, r)| {
                self.membership(node, cid)
                    .is_some_and(|m| m.table.get(&r.target).is_some())
            })
            .map(|(id, _)| *id)
            .collect();
        for id in ready {
            let r = self.nodes[node].rreqs.get_mut(&id).unwrap();
            r.satisfied = true;
            let queued = std::mem::take(&mut r.queued);
            let target = r.target.clone();
            let path = self.membership(node, cid).unwrap().table.get(&target).cloned().unwrap();
            for mut pkt in queued {
                self.note_route_use(node, cid, &path);
                pkt.route = Some(path.clone());
                self.send_unicast(node, pkt);
            }
        }
    }

    pub(crate) fn rreq_timeout(&mut self, node: usize, rreq_id: u64) {
        let Some(r) = self.nodes[node].rreqs.remove(&rreq_id) else {
            return;
        };
        self.nodes[node].expired_rreqs.insert(rreq_id);
        for pkt in r.queued {
            self.trace_ev(
                node,
                "DELIVERY_TIMEOUT",
                Some(pkt.packet_id),
                vec![("rreq", rreq_id.to_string()), ("dst", r.target.to_string())],
            );
            self.settle_drop(pkt.packet_id, DropReason::DeliveryTimeout);
        }
    }

    pub(crate) fn friend_timeout(&mut self, node: usize, id: u64) {
        if self.is_settled(id) {
            return;
        }
        self.trace_ev(node, "DELIVERY_TIMEOUT", Some(id), vec![("via", "friend".into())]);
        self.settle_drop(id, DropReason::DeliveryTimeout);
    }

    /// `node` learned that its link to `peer` is gone.
    pub(crate) fn link_broken(&mut self, node: usize, peer: usize) {
        let (me, other) = (self.node_id(node), self.node_id(peer));
        if !self.nodes[node].down.insert(peer) {
            return;
        }
        self.nodes[node].neighbors.remove(&other);
        self.metrics.link_breaks += 1;
        self.trace_ev(node, "LINK_BREAK", None, vec![("peer", other.to_string())]);
        let cids: Vec<CommunityId> = self.nodes[node].memberships.keys().cloned().collect();
        for cid in cids {
            let m = self.nodes[node].memberships.get_mut(&cid).unwrap();
            let lost = m.table.invalidate_edge(&me, &other);
            m.known.remove_edge(&me, &other);
            let mut origins: BTreeSet<MachineId> = BTreeSet::new();
            if m.view.tree_uses_edge(&me, &other) {
                origins.extend(m.view.members());
            }
            let key = edge_key(node, peer);
            if let Some(users) = self.route_users.get(&(cid.clone(), key)) {
                origins.extend(users.iter().cloned());
            }
            origins.retain(|o| o.node != me && o.node != other);
            if !lost.is_empty() {
                self.trace_ev(
                    node,
                    "INVALIDATE",
                    None,
                    vec![("cid", cid.to_string()), ("rows", lost.len().to_string())],
                );
            }
            for o in origins {
                let path = self.membership(node, &cid).and_then(|m| m.table.get(&o).cloned());
                match path {
                    Some(p) => self.send_rerr(node, &cid, p, &me, &other),
                    None => {
                        self.metrics.count_control_drop("rerr_unreachable");
                        self.trace_ev(
                            node,
                            "RERR_UNREACHABLE",
                            None,
                            vec![("cid", cid.to_string()), ("origin", o.to_string())],
                        );
                    }
                }
            }
        }
    }

    pub(crate) fn send_rerr(&mut self, node: usize, cid: &CommunityId, path: Path, a: &NodeId, b: &NodeId) {
        let mut pkt = self.new_packet(PacketKind::Rerr, node, Destination::Node(path.last().clone()));
        pkt.cid = Some(cid.clone());
        pkt.route = Some(path);
        pkt.body = Body::RouteError {
            a: a.clone(),
            b: b.clone(),
        };
        self.send_unicast(node, pkt);
    }

    /// `RERR` at its destination: drop rows over the broken edge.
    pub(crate) fn on_rerr(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::RouteError { a, b } = &pkt.body else { return };
        let Some(cid) = pkt.cid.clone() else { return };
        if let Some(m) = self.nodes[node].memberships.get_mut(&cid) {
            let lost = m.table.invalidate_edge(a, b);
            m.known.remove_edge(a, b);
            self.trace_ev(
                node,
                "INVALIDATE",
                Some(pkt.packet_id),
                vec![
                    ("cid", cid.to_string()),
                    ("rows", lost.len().to_string()),
                    ("edge", format!("{a}-{b}")),
                ],
            );
        }
    }

    pub(crate) fn hello_tick(&mut self, node: usize) {
        let interval = self.world.params.hello_interval;
        let timeout = SimTime(interval.ticks() * 2);
        for n in self.nodes[node].neighbors.expired(self.now, timeout) {
            self.link_broken(node, n.idx());
        }
        let cids: BTreeSet<CommunityId> = self.nodes[node].memberships.keys().cloned().collect();
        let member_neighbors = self.nodes[node]
            .neighbors
            .iter()
            .flat_map(|(_, e)| e.cids.iter().cloned())
            .collect();
        let mut pkt = self.new_packet(PacketKind::Hello, node, Destination::Broadcast);
        pkt.body = Body::Hello(HelloBeacon { cids, member_neighbors });
        self.broadcast(node, pkt);
        let next = self.now + interval;
        if next <= self.world.params.end_time {
            self.schedule_at(next, node, Timer::HelloTick);
        }
    }

    pub(crate) fn on_hello(&mut self, node: usize, from: usize, pkt: &PacketEnvelope) {
        if let Body::Hello(beacon) = &pkt.body {
            let n = self.node_id(from);
            self.nodes[node].neighbors.hello(&n, self.now, beacon);
        }
    }

    /// Hands a data packet to a neighbor that may reach the community.
    pub(crate) fn send_friend(&mut self, node: usize, inner: PacketEnvelope) -> Result<(), RoutingError> {
        let cid = inner.cid.clone().expect("community data");
        let me = self.node_id(node);
        let mut pkt = self.new_packet(PacketKind::Friend, node, Destination::Broadcast);
        pkt.cid = Some(cid.clone());
        pkt.payload_bytes = inner.payload_bytes;
        pkt.origin_machine = inner.origin_machine.clone();
        pkt.body = Body::Friend(Box::new(inner));
        let skip = vec![me.clone()];
        let chosen = {
            let ns = &self.nodes[node].neighbors;
            ns.member_for(&cid, &skip).or_else(|| ns.advertiser_for(&cid, &skip))
        };
        if let Some(next) = chosen {
            pkt.dst = Destination::Node(next.clone());
            pkt.route = Some(Path::new(vec![me, next]).expect("distinct"));
            self.send_unicast(node, pkt);
            return Ok(());
        }
        if self.live_neighbors(node).is_empty() {
            return Err(RoutingError::NoFriendAvailable(me));
        }
        self.broadcast(node, pkt);
        Ok(())
    }

    /// A `FRIEND` packet reached `node`, by unicast or as a first flood copy.
    pub(crate) fn on_friend(&mut self, node: usize, mut pkt: PacketEnvelope, flooded: bool) {
        let Body::Friend(inner) = &pkt.body else { return };
        let inner = (**inner).clone();
        let cid = pkt.cid.clone().expect("community friend packet");
        if self.membership(node, &cid).is_some() {
            let Body::Data {
                dest_machine: Some(dest),
                ..
            } = inner.body.clone()
            else {
                return;
            };
            let me = self.node_id(node);
            let mut data = inner;
            data.src = me.clone();
            data.hop_trace = vec![me];
            data.route = None;
            self.trace_ev(
                node,
                "FRIEND_UNWRAP",
                Some(data.packet_id),
                vec![("cid", cid.to_string())],
            );
            if self.is_settled(data.packet_id) {
                self.metrics.duplicates_suppressed += 1;
                return;
            }
            let has_row = self.membership(node, &cid).unwrap().table.get(&dest).is_some();
            let empty = self.membership(node, &cid).unwrap().table.is_empty();
            if dest.node.idx() == node || has_row || !empty {
                self.route_data(node, data, dest);
            } else {
                if !flooded {
                    self.settle_drop(data.packet_id, DropReason::NoRoute);
                }
                self.trace_ev(node, "DROP", Some(data.packet_id), vec![("reason", "no_route".into())]);
            }
            return;
        }
        if self.is_active_selfish(node) {
            self.selfish_drop(node, &pkt, !flooded);
            return;
        }
        let skip = pkt.hop_trace.clone();
        let chosen = {
            let ns = &self.nodes[node].neighbors;
            ns.member_for(&cid, &skip).or_else(|| ns.advertiser_for(&cid, &skip))
        };
        if let Some(next) = chosen {
            let mut hops = pkt.hop_trace.clone();
            hops.push(next.clone());
            pkt.route = Some(Path::new(hops).expect("next hop not yet visited"));
            pkt.dst = Destination::Node(next);
            self.forward_unicast(node, pkt);
            return;
        }
        let inner_id = inner.packet_id;
        let others = self
            .live_neighbors(node)
            .into_iter()
            .any(|n| !skip.iter().any(|s| s.idx() == n));
        if !others {
            self.trace_ev(node, "DROP", Some(inner_id), vec![("reason", "no_friend".into())]);
            if !flooded {
                self.settle_drop(inner_id, DropReason::NoFriend);
            }
            return;
        }
        pkt.dst = Destination::Broadcast;
        pkt.route = None;
        if !flooded {
            // switching to a flood: nodes already on the trace ignore it
            self.nodes[node].seen_floods.insert(pkt.packet_id);
        }
        self.rebroadcast(node, pkt);
    }
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}
