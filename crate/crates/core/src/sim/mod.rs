//! The discrete-event engine.
//!
//! Events are processed in `(time, seq)` order; all randomness comes from a
//! single ChaCha stream seeded per run, so a `(scenario, seed)` pair always
//! yields the same trace.
//!
//! Draw order within one transmission: a loss draw per receiver in index
//! order (skipped when the loss probability is zero), then one contention
//! draw that delays every surviving copy alike (skipped when contention is
//! zero).
//! Adversary events draw their targets and forged fields when they fire.

pub mod adversary;
pub mod link;
pub mod metrics;
pub mod queue;
pub mod time;
pub mod topology;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::community::{quote, CommunityView, Membership, ServiceInitiator};
use crate::fabric::{Layer, MachineHost, MachineInstance};
use crate::model::{
    Body, CommunityId, CommunityTable, Destination, Digest, MachineId, NodeId, PacketEnvelope, PacketKind, Path,
    SocietyTable,
};
use crate::routing::{edge_key, NeighborSet, PendingRequest, RouteReply};
use crate::scenario::{StepAction, World};
use crate::services::{SessionReport, TransferSession};

use adversary::{AdversaryProfile, Behavior};
use link::LinkModel;
use metrics::{DropReason, Metrics, Outcome};
use queue::{EventAction, EventQueue, Timer};
use time::SimTime;
use topology::Topology;
use trace::Trace;

/// Which protocol drives the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hamanet,
    /// Mirrored sends are flooded to every node; community steps are skipped.
    Baseline,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub mode: Mode,
    /// Overrides the scenario's neighbor-beacon switch.
    pub hello: Option<bool>,
    /// Overrides `count` on every mirrored send step.
    pub messages: Option<u32>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: Mode::Hamanet,
            hello: None,
            messages: None,
        }
    }
}

#[derive(Debug)]
pub(crate) struct NodeState {
    pub host: MachineHost,
    pub memberships: BTreeMap<CommunityId, Membership>,
    pub pending_joins: BTreeMap<CommunityId, MachineId>,
    pub neighbors: NeighborSet,
    /// Peers whose link break this node has already handled.
    pub down: BTreeSet<usize>,
    pub seen_floods: HashSet<u64>,
    pub sent: HashSet<u64>,
    /// Best copy so far of floods first heard at the current instant.
    pub pending_flood: BTreeMap<u64, (usize, PacketEnvelope)>,
    pub rreqs: BTreeMap<u64, PendingRequest>,
    pub expired_rreqs: BTreeSet<u64>,
    pub data_seen: HashSet<u64>,
    /// TABLE additions that arrived before this node's own view.
    pub early_adds: BTreeMap<CommunityId, Vec<PacketEnvelope>>,
}

pub struct Simulation {
    pub(crate) world: World,
    pub(crate) opts: RunOptions,
    pub(crate) seed: u64,
    pub(crate) hello: bool,
    pub(crate) topo: Topology,
    pub(crate) edge_loss: BTreeMap<(usize, usize), f64>,
    pub(crate) global_loss: Option<f64>,
    pub(crate) topology_changed: bool,
    pub(crate) nodes: Vec<NodeState>,
    pub(crate) queue: EventQueue,
    pub(crate) now: SimTime,
    pub(crate) last_event: SimTime,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) next_packet: u64,
    pub(crate) cid_counter: u32,
    pub(crate) initiators: BTreeMap<CommunityId, ServiceInitiator>,
    pub(crate) society: SocietyTable,
    pub(crate) metrics: Metrics,
    pub(crate) trace: Trace,
    pub(crate) outcomes: BTreeMap<u64, Option<Outcome>>,
    pub(crate) route_users: BTreeMap<(CommunityId, (usize, usize)), BTreeSet<MachineId>>,
    pub(crate) sessions: Vec<TransferSession>,
    pub(crate) culture_links: BTreeMap<String, LinkModel>,
    pub(crate) adversary: Vec<Option<usize>>,
    pub(crate) adversary_fired: Vec<u64>,
    pub(crate) step_errors: Vec<String>,
}

impl Simulation {
    pub fn new(world: &World, seed: u64, opts: RunOptions) -> Self {
        let world = world.clone();
        let hello = opts.hello.unwrap_or(world.params.hello);
        let nodes = world
            .nodes
            .iter()
            .map(|n| NodeState {
                host: MachineHost::new(n.clone()),
                memberships: BTreeMap::new(),
                pending_joins: BTreeMap::new(),
                neighbors: NeighborSet::new(),
                down: BTreeSet::new(),
                seen_floods: HashSet::new(),
                sent: HashSet::new(),
                pending_flood: BTreeMap::new(),
                rreqs: BTreeMap::new(),
                expired_rreqs: BTreeSet::new(),
                data_seen: HashSet::new(),
                early_adds: BTreeMap::new(),
            })
            .collect();
        let culture_links = world
            .registry
            .cultures()
            .map(|c| {
                let phys = world.registry.culture_art(&c.name, Layer::Physical);
                let mac = world.registry.culture_art(&c.name, Layer::Mac);
                (c.name.clone(), LinkModel::from_arts(phys, mac))
            })
            .collect();
        let n = world.nodes.len();
        let mut sim = Simulation {
            topo: world.topology.clone(),
            edge_loss: world.edge_loss.clone(),
            global_loss: None,
            topology_changed: false,
            nodes,
            queue: EventQueue::new(),
            now: SimTime::ZERO,
            last_event: SimTime::ZERO,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_packet: 1,
            cid_counter: 0,
            initiators: BTreeMap::new(),
            society: SocietyTable::new(),
            metrics: Metrics::default(),
            trace: Trace::new(),
            outcomes: BTreeMap::new(),
            route_users: BTreeMap::new(),
            sessions: Vec::new(),
            culture_links,
            adversary: vec![None; n],
            adversary_fired: Vec::new(),
            step_errors: Vec::new(),
            hello,
            seed,
            opts,
            world,
        };
        sim.schedule_steps();
        if opts.mode == Mode::Hamanet {
            for p in sim.world.adversaries.clone() {
                sim.inject_adversary(p);
            }
        }
        if hello {
            for i in 0..n {
                sim.schedule_at(SimTime::ZERO, i, Timer::HelloTick);
            }
        }
        sim
    }

    fn schedule_steps(&mut self) {
        for (index, step) in self.world.steps.iter().enumerate() {
            let reps = match &step.action {
                StepAction::Send { count, mirror, .. } => match self.opts.messages {
                    Some(k) if *mirror => k,
                    _ => *count,
                },
                _ => 1,
            };
            let interval = match &step.action {
                StepAction::Send { interval, .. } => *interval,
                _ => SimTime::ZERO,
            };
            for rep in 0..reps {
                let at = step.at + SimTime(interval.ticks() * rep as u64);
                self.queue.push(at, EventAction::Scenario { index, rep });
            }
        }
    }

    /// Registers a misbehaving node and schedules its activity.
    pub fn inject_adversary(&mut self, profile: AdversaryProfile) {
        let idx = match self.world.adversaries.iter().position(|p| *p == profile) {
            Some(i) => i,
            None => {
                self.world.adversaries.push(profile.clone());
                self.world.adversaries.len() - 1
            }
        };
        while self.adversary_fired.len() < self.world.adversaries.len() {
            self.adversary_fired.push(0);
        }
        let node = profile.node.idx();
        self.adversary[node] = Some(idx);
        if profile.behavior != Behavior::Selfish {
            self.schedule_at(profile.start.max(self.now), node, Timer::Adversary(idx));
        }
    }

    /// Processes every event up to and including `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some(next) = self.queue.peek_time() {
            if next > t {
                break;
            }
            let ev = self.queue.pop().unwrap();
            self.now = ev.time;
            self.last_event = ev.time;
            self.dispatch(ev.action);
        }
        if self.now < t {
            self.now = t;
        }
    }

    /// Runs to the scenario end time, or stops early once nothing is left to
    /// happen.
    pub fn run(&mut self) {
        let end = self.world.params.end_time;
        let now = self.now;
        self.run_until(end);
        if self.queue.peek_time().is_none() {
            self.now = self.last_event.max(now);
        }
    }

    fn dispatch(&mut self, action: EventAction) {
        match action {
            EventAction::Deliver { to, from, pkt } => self.on_deliver(to, from, *pkt),
            EventAction::Timer { node, timer } => self.on_timer(node, timer),
            EventAction::Scenario { index, rep } => self.on_step(index, rep),
        }
    }

    fn on_timer(&mut self, node: usize, timer: Timer) {
        match timer {
            Timer::FloodDecide(id) => self.flood_decide(node, id),
            Timer::JoinWindowClose(cid) => self.close_join_window(node, cid),
            Timer::RreqTimeout(id) => self.rreq_timeout(node, id),
            Timer::FriendTimeout(id) => self.friend_timeout(node, id),
            Timer::HelloTick => self.hello_tick(node),
            Timer::ChunkTimeout { session, seq, attempt } => self.chunk_timeout(session, seq, attempt),
            Timer::RequestTimeout { session, attempt } => self.request_timeout(session, attempt),
            Timer::Adversary(idx) => self.adversary_fire(idx),
        }
    }

    fn on_step(&mut self, index: usize, rep: u32) {
        let action = self.world.steps[index].action.clone();
        let baseline = self.opts.mode == Mode::Baseline;
        let result: Result<(), String> = match action {
            StepAction::StartService { .. } | StepAction::LateJoin { .. } | StepAction::Ftp { .. } if baseline => {
                Ok(())
            }
            StepAction::StartService { node, culture } => self
                .start_service(node, &culture)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            StepAction::LateJoin { node, cid } => self.late_join(node, &cid).map_err(|e| e.to_string()),
            StepAction::Send {
                from,
                to,
                bytes,
                mirror,
                ..
            } if baseline => {
                if mirror {
                    self.flood_send(from, to, bytes);
                }
                Ok(())
            }
            StepAction::Send {
                from,
                to,
                cid,
                op,
                bytes,
                ..
            } => self.step_send(from, to, &cid, op.as_deref(), bytes, rep),
            StepAction::Ftp { from, to, cid, file } => self
                .ftp_request(from, to, &cid, &file)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            StepAction::AddEdge { a, b } => {
                let _ = self.topo.add_edge(a, b);
                self.topology_changed = true;
                self.nodes[a].down.remove(&b);
                self.nodes[b].down.remove(&a);
                self.trace_ev(a, "EDGE_UP", None, vec![("peer", self.node_id(b).to_string())]);
                Ok(())
            }
            StepAction::RemoveEdge { a, b } => {
                if self.topo.remove_edge(a, b) {
                    self.topology_changed = true;
                    self.trace_ev(a, "EDGE_DOWN", None, vec![("peer", self.node_id(b).to_string())]);
                    if !self.hello && !baseline {
                        self.link_broken(a, b);
                        self.link_broken(b, a);
                    }
                }
                Ok(())
            }
            StepAction::SetLoss { edge, loss } => {
                match edge {
                    Some(k) => {
                        self.edge_loss.insert(k, loss);
                    }
                    None => {
                        self.edge_loss.clear();
                        self.global_loss = Some(loss);
                    }
                }
                Ok(())
            }
        };
        if let Err(e) = result {
            let node = match &self.world.steps[index].action {
                StepAction::StartService { node, .. } | StepAction::LateJoin { node, .. } => *node,
                StepAction::Send { from, .. } | StepAction::Ftp { from, .. } => *from,
                StepAction::AddEdge { a, .. } | StepAction::RemoveEdge { a, .. } => *a,
                StepAction::SetLoss { .. } => 0,
            };
            self.trace_ev(
                node,
                "STEP_ERROR",
                None,
                vec![("step", index.to_string()), ("err", quote(&e))],
            );
            self.step_errors.push(format!("step[{index}]: {e}"));
        }
    }

    fn step_send(
        &mut self,
        from: usize,
        to: usize,
        cid: &CommunityId,
        op: Option<&str>,
        bytes: u64,
        rep: u32,
    ) -> Result<(), String> {
        let Some(m) = self.membership(from, cid) else {
            return Err(format!("{} is not a member of {cid}", self.node_id(from)));
        };
        let to_id = self.node_id(to);
        let Some(dest) = m.view.member_on(&to_id) else {
            return Err(format!(
                "{to_id} has no member of {cid} known to {}",
                self.node_id(from)
            ));
        };
        let op = match op {
            Some(o) => o.to_string(),
            None => {
                let culture = m.view.culture.name().to_string();
                self.world
                    .registry
                    .culture_art(&culture, Layer::Application)
                    .and_then(|a| a.op_codes.iter().next().cloned())
                    .unwrap_or_default()
            }
        };
        self.send_data(from, cid, &dest, &op, Vec::new(), bytes, Some(rep as u64), None)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    // --- packets on the air -------------------------------------------------

    pub(crate) fn new_packet(&mut self, kind: PacketKind, src: usize, dst: Destination) -> PacketEnvelope {
        let id = self.next_packet;
        self.next_packet += 1;
        PacketEnvelope::new(id, kind, self.node_id(src), dst)
    }

    /// Originates a flood from `node`.
    pub(crate) fn broadcast(&mut self, node: usize, pkt: PacketEnvelope) {
        self.nodes[node].seen_floods.insert(pkt.packet_id);
        let receivers: Vec<usize> = self.topo.neighbors(node).collect();
        self.transmit(node, receivers, pkt, true);
    }

    /// Relays a flood copy unless `node` withholds it.
    pub(crate) fn rebroadcast(&mut self, node: usize, pkt: PacketEnvelope) {
        if self.is_active_selfish(node) {
            self.selfish_drop(node, &pkt, false);
            return;
        }
        let receivers: Vec<usize> = self.topo.neighbors(node).collect();
        self.transmit(node, receivers, pkt, true);
    }

    /// Sends a source-routed packet one hop further.
    pub(crate) fn send_unicast(&mut self, node: usize, pkt: PacketEnvelope) {
        let Some(next) = pkt.next_hop().cloned() else {
            self.trace_ev(
                node,
                "DROP",
                Some(pkt.packet_id),
                vec![("reason", "no_next_hop".into())],
            );
            self.lost_in_transit(&pkt, DropReason::NoRoute);
            return;
        };
        let nx = next.idx();
        if !self.topo.has_edge(node, nx) {
            self.trace_ev(
                node,
                "DROP",
                Some(pkt.packet_id),
                vec![("reason", "link_down".into()), ("next", next.to_string())],
            );
            self.lost_in_transit(&pkt, DropReason::LinkDown);
            if self.opts.mode == Mode::Hamanet {
                self.link_broken(node, nx);
                if pkt.kind == PacketKind::Data && pkt.hop_trace.len() > 1 {
                    if let Some(cid) = pkt.cid.clone() {
                        let back = pkt.travelled().reversed();
                        let me = self.node_id(node);
                        self.send_rerr(node, &cid, back, &me, &next);
                    }
                }
            }
            return;
        }
        self.transmit(node, vec![nx], pkt, false);
    }

    /// Relays a unicast packet that is passing through `node`.
    pub(crate) fn forward_unicast(&mut self, node: usize, pkt: PacketEnvelope) {
        if self.is_active_selfish(node) {
            self.selfish_drop(node, &pkt, true);
            return;
        }
        self.send_unicast(node, pkt);
    }

    pub(crate) fn selfish_drop(&mut self, node: usize, pkt: &PacketEnvelope, settle: bool) {
        self.metrics.selfish_drops += 1;
        self.trace_ev(
            node,
            "DROP",
            Some(pkt.packet_id),
            vec![("reason", "selfish".into()), ("kind", pkt.kind.name().into())],
        );
        if settle {
            // the origin cannot tell a silent relay from a slow one
            self.lost_in_transit(pkt, DropReason::DeliveryTimeout);
        } else if pkt.kind != PacketKind::Data {
            self.metrics.count_control_drop("selfish");
        }
    }

    /// Settles the data carried by a unicast packet that will never arrive.
    fn lost_in_transit(&mut self, pkt: &PacketEnvelope, reason: DropReason) {
        match (&pkt.kind, &pkt.body) {
            (PacketKind::Data, _) => self.settle_drop(pkt.packet_id, reason),
            (PacketKind::Friend, Body::Friend(inner)) if !pkt.dst.is_broadcast() => {
                self.settle_drop(inner.packet_id, reason)
            }
            _ => self.metrics.count_control_drop(reason.tag()),
        }
    }

    fn link_for(&self, pkt: &PacketEnvelope) -> LinkModel {
        pkt.cid
            .as_ref()
            .and_then(|c| self.initiators.get(c))
            .and_then(|si| self.culture_links.get(si.culture.name()))
            .copied()
            .unwrap_or(self.world.link)
    }

    fn loss_for(&self, a: usize, b: usize, link: &LinkModel) -> f64 {
        self.edge_loss
            .get(&edge_key(a, b))
            .copied()
            .or(self.global_loss)
            .unwrap_or(link.loss)
    }

    /// One transmission from `node`: loss draws per receiver in index order,
    /// then a single contention draw shared by the survivors.
    fn transmit(&mut self, node: usize, receivers: Vec<usize>, pkt: PacketEnvelope, broadcast: bool) {
        if !self.nodes[node].sent.insert(pkt.packet_id) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        self.metrics.count_tx(pkt.kind, broadcast);
        let mut fields = vec![(
            "dst",
            if broadcast {
                "*".to_string()
            } else {
                receivers[0].to_string()
            },
        )];
        if !broadcast {
            fields[0].1 = self.node_id(receivers[0]).to_string();
        }
        if let Some(c) = &pkt.cid {
            fields.push(("cid", c.to_string()));
        }
        if pkt.kind == PacketKind::Data {
            fields.push(("op", pkt.op_code.clone()));
        }
        fields.push(("hop", pkt.hop_trace.len().to_string()));
        self.trace_ev(node, &format!("{}_TX", pkt.kind.name()), Some(pkt.packet_id), fields);
        let link = self.link_for(&pkt);
        let mut survivors = Vec::with_capacity(receivers.len());
        for r in receivers {
            let p = self.loss_for(node, r, &link);
            if p > 0.0 && self.rng.random::<f64>() < p {
                self.metrics.link_losses += 1;
                self.trace_ev(
                    r,
                    "LOSS",
                    Some(pkt.packet_id),
                    vec![("from", self.node_id(node).to_string())],
                );
                if !broadcast {
                    self.lost_in_transit(&pkt, DropReason::Loss);
                }
                continue;
            }
            survivors.push(r);
        }
        let contention = if link.contention.ticks() > 0 {
            SimTime(self.rng.random_range(0..=link.contention.ticks()))
        } else {
            SimTime::ZERO
        };
        let at = self.now + link.delay + contention;
        for r in survivors {
            self.queue.push(
                at,
                EventAction::Deliver {
                    to: r,
                    from: node,
                    pkt: Box::new(pkt.clone()),
                },
            );
        }
    }

    fn on_deliver(&mut self, to: usize, from: usize, mut pkt: PacketEnvelope) {
        let me = self.node_id(to);
        let sender = self.node_id(from);
        self.nodes[to].neighbors.heard(&sender, self.now);
        self.nodes[to].down.remove(&from);
        if pkt.hop_trace.contains(&me) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        pkt.hop_trace.push(me);
        let ev = format!("{}_RX", pkt.kind.name());
        self.trace_ev(to, &ev, Some(pkt.packet_id), vec![("from", sender.to_string())]);
        if pkt.kind == PacketKind::Hello {
            self.on_hello(to, from, &pkt);
            return;
        }
        match pkt.dst.clone() {
            Destination::Broadcast => self.flood_copy(to, from, pkt),
            Destination::Node(d) if d.idx() != to => self.forward_unicast(to, pkt),
            Destination::Node(_) => self.on_unicast(to, pkt),
        }
    }

    /// Holds the first copy of a flood until the end of the instant; a copy
    /// from a lower-index sender at the same instant replaces it.
    fn flood_copy(&mut self, to: usize, from: usize, pkt: PacketEnvelope) {
        let id = pkt.packet_id;
        if self.nodes[to].seen_floods.contains(&id) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        match self.nodes[to].pending_flood.get_mut(&id) {
            Some(held) => {
                self.metrics.duplicates_suppressed += 1;
                if from < held.0 {
                    *held = (from, pkt);
                }
            }
            None => {
                self.nodes[to].pending_flood.insert(id, (from, pkt));
                self.schedule_at(self.now, to, Timer::FloodDecide(id));
            }
        }
    }

    fn flood_decide(&mut self, node: usize, id: u64) {
        let Some((_, pkt)) = self.nodes[node].pending_flood.remove(&id) else {
            return;
        };
        self.nodes[node].seen_floods.insert(id);
        match pkt.kind {
            PacketKind::McStart if self.opts.mode == Mode::Hamanet => self.on_mcstart(node, pkt),
            PacketKind::McJoin => self.on_join_flood(node, pkt),
            PacketKind::Rreq => self.on_rreq(node, pkt),
            PacketKind::Friend => self.on_friend(node, pkt, true),
            PacketKind::Data => self.on_flood_data(node, pkt),
            _ => {}
        }
    }

    fn on_unicast(&mut self, node: usize, pkt: PacketEnvelope) {
        match pkt.kind {
            PacketKind::McJoin => self.on_mcjoin(node, pkt),
            PacketKind::Table => self.on_table(node, pkt),
            PacketKind::Rrep => self.on_rrep(node, pkt),
            PacketKind::Rerr => self.on_rerr(node, pkt),
            PacketKind::Friend => self.on_friend(node, pkt, false),
            PacketKind::Data => self.on_data(node, pkt),
            _ => self.reject_packet(node, &pkt, "unexpected_unicast"),
        }
    }

    /// Data at its destination node: the machine decides whether to accept.
    pub(crate) fn on_data(&mut self, node: usize, pkt: PacketEnvelope) {
        let id = pkt.packet_id;
        if !self.nodes[node].data_seen.insert(id) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        let Body::Data {
            dest_machine, session, ..
        } = &pkt.body
        else {
            return;
        };
        let machine = dest_machine
            .as_ref()
            .and_then(|m| self.nodes[node].host.get(m))
            .filter(|m| m.cid().is_some() && m.cid() == pkt.cid.as_ref());
        let Some(machine) = machine else {
            self.trace_ev(node, "DROP", Some(id), vec![("reason", "not_member".into())]);
            self.settle_drop(id, DropReason::NotMember);
            return;
        };
        let mid = machine.mid().clone();
        if !machine.accepts(&pkt.op_code) {
            self.metrics.rejected_ops += 1;
            self.trace_ev(
                node,
                "OP_REJECT",
                Some(id),
                vec![("op", pkt.op_code.clone()), ("machine", mid.to_string())],
            );
            self.settle_drop(id, DropReason::OpRejected);
            return;
        }
        let machine = self.nodes[node].host.get_mut(&mid).unwrap();
        *machine.state.entry("ops_handled".into()).or_default() += 1;
        *machine.state.entry(format!("op:{}", pkt.op_code)).or_default() += 1;
        let machine = self.nodes[node].host.get(&mid).unwrap().clone();
        self.trace_ev(
            node,
            "DELIVER",
            Some(id),
            vec![
                ("cid", pkt.cid.as_ref().map(|c| c.to_string()).unwrap_or_default()),
                ("machine", mid.to_string()),
                ("mcid", machine.cid().map(|c| c.to_string()).unwrap_or_default()),
                ("op", pkt.op_code.clone()),
                ("hops", (pkt.hop_trace.len() - 1).to_string()),
            ],
        );
        self.settle(id, Outcome::Delivered, pkt.payload_bytes);
        if let Some(s) = *session {
            self.on_session_packet(node, s, &pkt);
        }
    }

    pub(crate) fn reject_packet(&mut self, node: usize, pkt: &PacketEnvelope, reason: &str) {
        self.metrics.rejected_packets += 1;
        self.trace_ev(
            node,
            "REJECT",
            Some(pkt.packet_id),
            vec![("reason", reason.into()), ("kind", pkt.kind.name().into())],
        );
    }

    // --- data outcomes ------------------------------------------------------

    pub(crate) fn register_send(&mut self, id: u64) {
        self.outcomes.insert(id, None);
        self.metrics.data_sends += 1;
    }

    pub(crate) fn is_settled(&self, id: u64) -> bool {
        matches!(self.outcomes.get(&id), Some(Some(_)))
    }

    pub(crate) fn settle_drop(&mut self, id: u64, reason: DropReason) {
        self.settle(id, Outcome::Dropped(reason), 0);
    }

    pub(crate) fn settle(&mut self, id: u64, outcome: Outcome, bytes: u64) {
        let Some(slot) = self.outcomes.get_mut(&id) else { return };
        if let Some(prev) = slot {
            if *prev == Outcome::Dropped(DropReason::DeliveryTimeout) && outcome == Outcome::Delivered {
                self.metrics.late_deliveries += 1;
            } else {
                self.metrics.double_settles += 1;
            }
            return;
        }
        match &outcome {
            Outcome::Delivered => {
                self.metrics.delivered += 1;
                self.metrics.bytes_delivered += bytes;
            }
            Outcome::Dropped(r) => self.metrics.count_drop(*r),
        }
        *slot = Some(outcome);
    }

    pub fn outcome(&self, id: u64) -> Option<&Outcome> {
        self.outcomes.get(&id).and_then(Option::as_ref)
    }

    // --- adversaries --------------------------------------------------------

    pub(crate) fn is_adversary(&self, node: usize) -> bool {
        self.adversary[node].is_some()
    }

    pub(crate) fn adversary_behavior(&self, node: usize) -> Option<Behavior> {
        let p = &self.world.adversaries[self.adversary[node]?];
        p.active_at(self.now).then_some(p.behavior)
    }

    pub(crate) fn is_active_selfish(&self, node: usize) -> bool {
        self.adversary_behavior(node) == Some(Behavior::Selfish)
    }

    fn undeclared_op(&self) -> String {
        let ops = self.world.registry.all_ops();
        let mut op = "UNDECLARED_OP".to_string();
        while ops.contains(&op) {
            op.push('_');
        }
        op
    }

    fn adversary_fire(&mut self, idx: usize) {
        let p = self.world.adversaries[idx].clone();
        let node = p.node.idx();
        if p.stop.is_some_and(|s| self.now >= s) || p.count.is_some_and(|c| self.adversary_fired[idx] >= c) {
            return;
        }
        self.adversary_fired[idx] += 1;
        let members: Vec<(usize, MachineId, CommunityId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != node)
            .flat_map(|(i, s)| {
                s.memberships
                    .iter()
                    .map(move |(c, m)| (i, m.machine.clone(), c.clone()))
            })
            .collect();
        if !members.is_empty() {
            let (target, mid, cid) = members[self.rng.random_range(0..members.len())].clone();
            if let Some(route) = self.topo.shortest_path(node, target) {
                match p.behavior {
                    Behavior::UndeclaredOp => {
                        let mut pkt = self.new_packet(PacketKind::Data, node, Destination::Node(mid.node.clone()));
                        pkt.op_code = self.undeclared_op();
                        pkt.cid = Some(cid);
                        pkt.payload_bytes = 32;
                        pkt.route = Some(route);
                        pkt.body = Body::Data {
                            dest_machine: Some(mid),
                            target: None,
                            session: None,
                        };
                        self.metrics.adversary_packets += 1;
                        self.register_send(pkt.packet_id);
                        self.send_unicast(node, pkt);
                    }
                    Behavior::BogusRrep => {
                        let cid = if self.rng.random_bool(0.5) {
                            cid
                        } else {
                            CommunityId::new(format!("X{}", self.rng.random_range(1..1000u32)))
                        };
                        let rreq_id = self.rng.random::<u64>() | (1 << 63);
                        let me = self.node_id(node);
                        let reply = RouteReply {
                            rreq_id,
                            responder: MachineId::new(me.clone(), 0),
                            rows: vec![(mid.clone(), Path::new(vec![me, mid.node.clone()]).unwrap())],
                        };
                        let mut pkt = self.new_packet(PacketKind::Rrep, node, Destination::Node(mid.node.clone()));
                        pkt.cid = Some(cid);
                        pkt.route = Some(route);
                        pkt.body = Body::Reply(reply);
                        self.metrics.adversary_packets += 1;
                        self.send_unicast(node, pkt);
                    }
                    Behavior::Selfish => {}
                }
            }
        }
        let next = self.now + p.period();
        if p.stop.is_none_or(|s| next < s) && next <= self.world.params.end_time {
            self.schedule_at(next, node, Timer::Adversary(idx));
        }
    }

    /// A fabricated answer to a route request, claiming a direct link.
    pub(crate) fn bogus_reply(&mut self, node: usize, pkt: &PacketEnvelope, req: &crate::routing::RouteRequest) {
        let me = self.node_id(node);
        let mut rows = Vec::new();
        if let crate::routing::Target::Machine(t) = &req.target {
            if t.node != me {
                rows.push((t.clone(), Path::new(vec![me.clone(), t.node.clone()]).unwrap()));
            }
        }
        let reply = RouteReply {
            rreq_id: req.rreq_id,
            responder: MachineId::new(me, 0),
            rows,
        };
        let mut rrep = self.new_packet(PacketKind::Rrep, node, Destination::Node(pkt.src.clone()));
        rrep.cid = Some(req.cid.clone());
        rrep.route = Some(pkt.travelled().reversed());
        rrep.body = Body::Reply(reply);
        self.metrics.adversary_packets += 1;
        self.send_unicast(node, rrep);
        self.rebroadcast(node, pkt.clone());
    }

    // --- helpers ------------------------------------------------------------

    pub(crate) fn schedule_at(&mut self, at: SimTime, node: usize, timer: Timer) {
        self.queue.push(at, EventAction::Timer { node, timer });
    }

    pub(crate) fn trace_ev(&mut self, node: usize, ev: &str, pkt: Option<u64>, fields: Vec<(&str, String)>) {
        let label = self.world.nodes[node].label().to_string();
        self.trace.record(self.now, &label, ev, pkt, &fields);
    }

    pub fn node_id(&self, i: usize) -> NodeId {
        self.world.nodes[i].clone()
    }

    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.world.node(label)
    }

    pub(crate) fn live_neighbors(&self, node: usize) -> Vec<usize> {
        if self.hello {
            self.nodes[node].neighbors.iter().map(|(n, _)| n.idx()).collect()
        } else {
            self.topo.neighbors(node).collect()
        }
    }

    pub(crate) fn note_install(&mut self, path: &Path) {
        if !path.is_walk_in(&self.topo) {
            self.metrics.invalid_paths_installed += 1;
        }
    }

    pub(crate) fn note_route_use(&mut self, node: usize, cid: &CommunityId, path: &Path) {
        let Some(origin) = self.membership(node, cid).map(|m| m.machine.clone()) else {
            return;
        };
        for (a, b) in path.edges() {
            self.route_users
                .entry((cid.clone(), edge_key(a.idx(), b.idx())))
                .or_default()
                .insert(origin.clone());
        }
    }

    pub fn membership(&self, node: usize, cid: &CommunityId) -> Option<&Membership> {
        self.nodes[node].memberships.get(cid)
    }

    pub fn memberships(&self, node: usize) -> impl Iterator<Item = (&CommunityId, &Membership)> {
        self.nodes[node].memberships.iter()
    }

    pub fn table(&self, node: usize, cid: &CommunityId) -> Option<&CommunityTable> {
        self.membership(node, cid).map(|m| &m.table)
    }

    pub fn view(&self, node: usize, cid: &CommunityId) -> Option<&CommunityView> {
        self.membership(node, cid).map(|m| &m.view)
    }

    pub fn machines(&self, node: usize) -> &[MachineInstance] {
        self.nodes[node].host.machines()
    }

    pub fn neighbors(&self, node: usize) -> &NeighborSet {
        &self.nodes[node].neighbors
    }

    pub fn society(&self) -> &SocietyTable {
        &self.society
    }

    pub fn initiator(&self, cid: &CommunityId) -> Option<&ServiceInitiator> {
        self.initiators.get(cid)
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn sessions(&self) -> &[TransferSession] {
        &self.sessions
    }

    /// Digest over every member table and the society table.
    pub fn tables_digest(&self) -> Digest {
        let mut text = String::new();
        for (i, s) in self.nodes.iter().enumerate() {
            for (cid, m) in &s.memberships {
                text.push_str(&format!("{}\t{}\t{}\n", self.world.nodes[i], cid, m.table.digest()));
            }
        }
        text.push_str(&format!("society\t{}\n", self.society.digest()));
        Digest::of(text.as_bytes())
    }

    /// Digest over tables, neighbor sets and machine state.
    pub fn snapshot(&self) -> Digest {
        let mut text = format!("{}\n", self.tables_digest());
        for (i, s) in self.nodes.iter().enumerate() {
            let ns: Vec<&str> = s.neighbors.iter().map(|(n, _)| n.label()).collect();
            text.push_str(&format!("{}\t{}\n", self.world.nodes[i], ns.join(",")));
            for m in s.host.machines() {
                let cid = m.cid().map(|c| c.to_string()).unwrap_or_default();
                text.push_str(&format!("{}\t{}\t{}\t{:?}\n", m.mid(), m.culture(), cid, m.state));
            }
        }
        Digest::of(text.as_bytes())
    }

    pub fn step_errors(&self) -> &[String] {
        &self.step_errors
    }

    /// Invariant violations found after a run.
    pub fn audit(&self) -> Vec<String> {
        let m = &self.metrics;
        let mut out = Vec::new();
        let in_flight = self.outcomes.values().filter(|o| o.is_none()).count() as u64;
        if m.data_sends != m.delivered + m.dropped_total() + in_flight {
            out.push(format!(
                "data conservation: {} sends, {} delivered, {} dropped, {} in flight",
                m.data_sends,
                m.delivered,
                m.dropped_total(),
                in_flight
            ));
        }
        if m.double_settles > 0 {
            out.push(format!("{} packets settled twice", m.double_settles));
        }
        if m.order_violations > 0 {
            out.push(format!("{} chunks handed up out of order", m.order_violations));
        }
        if m.invalid_paths_installed > 0 && !self.topology_changed {
            out.push(format!(
                "{} installed paths are not walks in the topology",
                m.invalid_paths_installed
            ));
        }
        out
    }

    /// Finalizes counters and builds the report.
    pub fn finish(&mut self) -> Report {
        self.metrics.in_flight = self.outcomes.values().filter(|o| o.is_none()).count() as u64;
        let mut tables = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for (i, s) in self.nodes.iter().enumerate() {
            if s.memberships.is_empty() {
                continue;
            }
            let label = self.world.nodes[i].to_string();
            let mut per = BTreeMap::new();
            let mut per_d = BTreeMap::new();
            for (cid, m) in &s.memberships {
                per.insert(
                    cid.to_string(),
                    m.table.iter().map(|(k, p)| format!("{k} {p}")).collect::<Vec<_>>(),
                );
                per_d.insert(cid.to_string(), m.table.digest().to_hex());
            }
            tables.insert(label.clone(), per);
            digests.insert(label, per_d);
        }
        Report {
            scenario: self.world.name.clone(),
            seed: self.seed,
            mode: self.opts.mode,
            end_ticks: self.now.ticks(),
            metrics: self.metrics.clone(),
            society: self
                .society
                .iter()
                .map(|(c, m)| (c.to_string(), m.to_string()))
                .collect(),
            tables,
            table_digests: digests,
            sessions: self.sessions.iter().map(|s| s.report(&self.world)).collect(),
            step_errors: self.step_errors.clone(),
            audit: self.audit(),
            snapshot: self.snapshot().to_hex(),
            trace_digest: self.trace.digest().to_hex(),
            trace_lines: self.trace.len(),
        }
    }
}

/// Everything a run reports. Serialized with sorted keys.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub end_ticks: u64,
    pub metrics: Metrics,
    pub society: BTreeMap<String, String>,
    pub tables: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub table_digests: BTreeMap<String, BTreeMap<String, String>>,
    pub sessions: Vec<SessionReport>,
    pub step_errors: Vec<String>,
    pub audit: Vec<String>,
    pub snapshot: String,
    pub trace_digest: String,
    pub trace_lines: usize,
}

impl Report {
    /// Canonical JSON: sorted keys, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }
}

pub struct RunOutput {
    pub report: Report,
    pub trace: Trace,
    pub sim: Simulation,
}

/// Runs a world to its end time.
pub fn run(world: &World, seed: u64, opts: RunOptions) -> RunOutput {
    let mut sim = Simulation::new(world, seed, opts);
    sim.run();
    let report = sim.finish();
    let trace = sim.trace.clone();
    RunOutput { report, trace, sim }
}

/// Reports from one world run under several seeds.
#[derive(Clone, Debug, Serialize)]
pub struct Sweep {
    pub scenario: String,
    pub mode: Mode,
    /// One report per distinct seed, in seed order.
    pub runs: Vec<Report>,
}

impl Sweep {
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("sweep serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Runs `world` once per seed, in parallel. Each run is independent, so the
/// result does not depend on scheduling.
pub fn sweep(world: &World, seeds: &[u64], opts: RunOptions) -> Sweep {
    use rayon::prelude::*;
    let seeds: Vec<u64> = seeds.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let runs = seeds.par_iter().map(|&s| run(world, s, opts).report).collect();
    Sweep {
        scenario: world.name.clone(),
        mode: opts.mode,
        runs,
    }
}
