//! Community formation, late joins and member tables.
//!
//! A node running a service broadcasts `MCSTART`; interested nodes answer
//! with `MCJOIN` along the reversed flood trace. When the join window closes
//! the initiator registers the community and sends each member the full view:
//! every member's initiator-relative path. Members derive their own rows from
//! that view.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::fabric::FabricError;
use crate::model::{
    Body, CommunityId, CommunityTable, Destination, MachineCulture, MachineId, NodeId, PacketEnvelope, PacketKind,
    Path, TableUpdate,
};
use crate::sim::queue::Timer;
use crate::sim::time::SimTime;
use crate::sim::Simulation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommunityError {
    #[error("{node} lacks the {attribute:?} attribute required by {culture:?}")]
    PrerequisiteUnmet {
        node: NodeId,
        culture: String,
        attribute: String,
    },
    #[error("no community {0} is registered")]
    NoSuchCommunity(CommunityId),
    #[error("{0} is an adversary and never joins communities")]
    Adversary(NodeId),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// A community as described by its initiator: who is in it and the path
/// from the initiator to each member.
#[derive(Clone, Debug, PartialEq)]
pub struct CommunityView {
    pub cid: CommunityId,
    pub culture: MachineCulture,
    pub si: MachineId,
    pub si_paths: BTreeMap<MachineId, Path>,
}

impl CommunityView {
    pub fn new(cid: CommunityId, culture: MachineCulture, si: MachineId) -> Self {
        CommunityView {
            cid,
            culture,
            si,
            si_paths: BTreeMap::new(),
        }
    }

    /// The initiator first, then the members in machine order.
    pub fn members(&self) -> Vec<MachineId> {
        let mut out = vec![self.si.clone()];
        out.extend(self.si_paths.keys().filter(|m| **m != self.si).cloned());
        out
    }

    pub fn contains(&self, mid: &MachineId) -> bool {
        *mid == self.si || self.si_paths.contains_key(mid)
    }

    pub fn member_on(&self, node: &NodeId) -> Option<MachineId> {
        self.members().into_iter().find(|m| m.node == *node)
    }

    pub fn si_path(&self, mid: &MachineId) -> Option<Path> {
        if *mid == self.si {
            Some(Path::single(self.si.node.clone()))
        } else {
            self.si_paths.get(mid).cloned()
        }
    }

    /// Whether some initiator path crosses the edge.
    pub fn tree_uses_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        self.si_paths.values().any(|p| p.uses_edge(a, b))
    }
}

/// Rebases a path through the initiator: `a -> si -> b`, with loops erased.
pub fn rebase_path(si_to_a: &Path, si_to_b: &Path) -> Path {
    si_to_a.reversed().splice(si_to_b)
}

/// The part of the network a member has learned about from paths it was given.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnownGraph {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl KnownGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(&mut self, a: &NodeId, b: &NodeId) {
        if a == b {
            return;
        }
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b.clone()).or_default().insert(a.clone());
    }

    pub fn add_path(&mut self, path: &Path) {
        for (a, b) in path.edges() {
            self.add_edge(a, b);
        }
    }

    pub fn remove_edge(&mut self, a: &NodeId, b: &NodeId) {
        if let Some(s) = self.adj.get_mut(a) {
            s.remove(b);
        }
        if let Some(s) = self.adj.get_mut(b) {
            s.remove(a);
        }
    }

    pub fn has_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        self.adj.get(a).is_some_and(|s| s.contains(b))
    }

    /// BFS over known edges; lower node indices are explored first.
    pub fn shortest(&self, from: &NodeId, to: &NodeId) -> Option<Path> {
        if from == to {
            return Some(Path::single(from.clone()));
        }
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut queue = VecDeque::from([from.clone()]);
        parent.insert(from.clone(), from.clone());
        while let Some(u) = queue.pop_front() {
            for v in self.adj.get(&u).into_iter().flatten() {
                if parent.contains_key(v) {
                    continue;
                }
                parent.insert(v.clone(), u.clone());
                if v == to {
                    let mut hops = vec![to.clone()];
                    while hops.last() != Some(from) {
                        hops.push(parent[hops.last().unwrap()].clone());
                    }
                    hops.reverse();
                    return Path::new(hops).ok();
                }
                queue.push_back(v.clone());
            }
        }
        None
    }
}

/// Builds the table of `owner` from a view.
///
/// Each row is the shortest route over `known`: usually the initiator paths
/// plus the owner's own links and travelled routes. When `known` has no
/// route, the rebased initiator path is used.
pub fn member_table(owner: &MachineId, view: &CommunityView, known: &KnownGraph) -> CommunityTable {
    let mut table = CommunityTable::new(owner.node.clone(), view.cid.clone());
    let own = view.si_path(owner);
    for m in view.members() {
        if m.node == owner.node {
            continue;
        }
        let path = known.shortest(&owner.node, &m.node).or_else(|| {
            let (a, b) = (own.as_ref()?, view.si_path(&m)?);
            Some(rebase_path(a, &b))
        });
        if let Some(p) = path {
            let _ = table.insert(m, p);
        }
    }
    table
}

/// Knowledge graph seeded with every initiator path of a view.
pub fn view_graph(view: &CommunityView) -> KnownGraph {
    let mut g = KnownGraph::new();
    for p in view.si_paths.values() {
        g.add_path(p);
    }
    g
}

/// Join bookkeeping held by an initiator until the window closes.
#[derive(Clone, Debug)]
pub struct ServiceInitiator {
    pub node: NodeId,
    pub cid: CommunityId,
    pub culture: MachineCulture,
    pub machine: MachineId,
    pub join_deadline: SimTime,
    /// Reversed `MCJOIN` traces, in arrival order of first copy.
    pub joiners: BTreeMap<MachineId, Path>,
    pub formed: bool,
}

/// A node's participation in one community.
#[derive(Clone, Debug)]
pub struct Membership {
    pub machine: MachineId,
    pub view: CommunityView,
    pub known: KnownGraph,
    pub table: CommunityTable,
    pub is_si: bool,
}

impl Simulation {
    /// Starts `culture` on `node` as a new community initiator.
    pub fn start_service(&mut self, node: usize, culture: &str) -> Result<CommunityId, CommunityError> {
        let me = self.node_id(node);
        if self.is_adversary(node) {
            return Err(CommunityError::Adversary(me));
        }
        let def = self
            .world
            .registry
            .culture(culture)
            .ok_or_else(|| FabricError::UnknownCulture(culture.to_string()))?;
        if let Some(missing) = def.requires.iter().find(|a| !self.world.attributes[node].contains(*a)) {
            return Err(CommunityError::PrerequisiteUnmet {
                node: me,
                culture: culture.to_string(),
                attribute: missing.clone(),
            });
        }
        let registry = &self.world.registry;
        let mid = self.nodes[node].host.instantiate(registry, culture)?.mid().clone();
        self.cid_counter += 1;
        let cid = CommunityId::minted(self.cid_counter);
        self.nodes[node]
            .host
            .get_mut(&mid)
            .expect("just instantiated")
            .join(cid.clone())?;
        let culture = MachineCulture::new(culture);
        let view = CommunityView::new(cid.clone(), culture.clone(), mid.clone());
        let table = CommunityTable::new(me.clone(), cid.clone());
        self.nodes[node].memberships.insert(
            cid.clone(),
            Membership {
                machine: mid.clone(),
                view,
                known: KnownGraph::new(),
                table,
                is_si: true,
            },
        );
        let deadline = self.now + self.world.params.join_window;
        self.initiators.insert(
            cid.clone(),
            ServiceInitiator {
                node: me.clone(),
                cid: cid.clone(),
                culture: culture.clone(),
                machine: mid.clone(),
                join_deadline: deadline,
                joiners: BTreeMap::new(),
                formed: false,
            },
        );
        self.trace_ev(
            node,
            "START",
            None,
            vec![("cid", cid.to_string()), ("culture", quote(culture.name()))],
        );
        let mut pkt = self.new_packet(PacketKind::McStart, node, Destination::Broadcast);
        pkt.cid = Some(cid.clone());
        pkt.origin_machine = Some(mid);
        pkt.body = Body::Announce { culture };
        self.broadcast(node, pkt);
        self.schedule_at(deadline, node, Timer::JoinWindowClose(cid.clone()));
        Ok(cid)
    }

    /// A first copy of `MCSTART` after tie-breaking.
    pub(crate) fn on_mcstart(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::Announce { culture } = &pkt.body else {
            return;
        };
        let cid = pkt.cid.clone().expect("MCSTART carries a community id");
        let interested = self.world.interests[node].contains(culture.name());
        let already =
            self.nodes[node].memberships.contains_key(&cid) || self.nodes[node].pending_joins.contains_key(&cid);
        if interested && !already && !self.is_adversary(node) {
            let registry = &self.world.registry;
            match self.nodes[node].host.instantiate(registry, culture.name()) {
                Ok(m) => {
                    let mid = m.mid().clone();
                    self.nodes[node].pending_joins.insert(cid.clone(), mid.clone());
                    let si = pkt.hop_trace[0].idx();
                    let mut join = self.new_packet(PacketKind::McJoin, node, Destination::Node(self.node_id(si)));
                    join.cid = Some(cid.clone());
                    join.origin_machine = Some(mid.clone());
                    join.route = Some(pkt.travelled().reversed());
                    join.body = Body::Join {
                        member: mid,
                        late: false,
                    };
                    self.send_unicast(node, join);
                }
                Err(e) => {
                    self.trace_ev(
                        node,
                        "JOIN_SKIP",
                        Some(pkt.packet_id),
                        vec![("reason", quote(&e.to_string()))],
                    );
                }
            }
        }
        self.rebroadcast(node, pkt);
    }

    /// `MCJOIN` that reached its unicast destination.
    pub(crate) fn on_mcjoin(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::Join { member, .. } = pkt.body.clone() else {
            return;
        };
        let Some(cid) = pkt.cid.clone() else { return };
        let me = self.node_id(node);
        let Some(si) = self.initiators.get(&cid).filter(|s| s.node == me) else {
            self.reject_packet(node, &pkt, "unknown_community");
            return;
        };
        if si.joiners.contains_key(&member) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        let path = pkt.travelled().reversed();
        let formed = si.formed;
        self.note_install(&path);
        self.trace_ev(
            node,
            "JOIN_RX",
            Some(pkt.packet_id),
            vec![("cid", cid.to_string()), ("member", member.to_string())],
        );
        let si = self.initiators.get_mut(&cid).unwrap();
        si.joiners.insert(member.clone(), path.clone());
        let m = self.nodes[node].memberships.get_mut(&cid).unwrap();
        let _ = m.table.insert(member.clone(), path.clone());
        m.known.add_path(&path);
        if formed {
            // joined after the window: answer with the view directly
            m.view.si_paths.insert(member, path.clone());
            let view = m.view.clone();
            self.send_table(node, path, &cid, TableUpdate::Full { view, announce: true });
        }
    }

    /// Closes the join window: registers the community and disseminates the view.
    pub(crate) fn close_join_window(&mut self, node: usize, cid: CommunityId) {
        let Some(si) = self.initiators.get_mut(&cid) else {
            return;
        };
        si.formed = true;
        let culture = si.culture.clone();
        let joiners: Vec<MachineId> = si.joiners.keys().cloned().collect();
        self.society.register(cid.clone(), culture);
        self.metrics.formation_ticks.insert(cid.to_string(), self.now.ticks());
        let m = self.nodes[node].memberships.get_mut(&cid).unwrap();
        let mut unreachable = Vec::new();
        for j in &joiners {
            match m.table.get(j) {
                Some(p) => {
                    m.view.si_paths.insert(j.clone(), p.clone());
                }
                None => unreachable.push(j.clone()),
            }
        }
        let view = m.view.clone();
        self.trace_ev(
            node,
            "FORMED",
            None,
            vec![
                ("cid", cid.to_string()),
                ("members", (view.si_paths.len() + 1).to_string()),
            ],
        );
        for j in unreachable {
            self.metrics.unreachable_members += 1;
            self.trace_ev(
                node,
                "UNREACHABLE",
                None,
                vec![("cid", cid.to_string()), ("member", j.to_string())],
            );
        }
        for (mid, path) in view.si_paths.clone() {
            if mid.node.idx() != node {
                self.send_table(
                    node,
                    path,
                    &cid,
                    TableUpdate::Full {
                        view: view.clone(),
                        announce: false,
                    },
                );
            }
        }
    }

    fn send_table(&mut self, node: usize, path: Path, cid: &CommunityId, update: TableUpdate) {
        let dst = path.last().clone();
        let mut pkt = self.new_packet(PacketKind::Table, node, Destination::Node(dst));
        pkt.cid = Some(cid.clone());
        pkt.origin_machine = self.nodes[node].memberships.get(cid).map(|m| m.machine.clone());
        pkt.route = Some(path);
        pkt.body = Body::Table(update);
        self.send_unicast(node, pkt);
    }

    /// Table packet that reached its destination.
    pub(crate) fn on_table(&mut self, node: usize, pkt: PacketEnvelope) {
        let Body::Table(update) = pkt.body.clone() else { return };
        let Some(cid) = pkt.cid.clone() else { return };
        match update {
            TableUpdate::Full { view, announce } => self.accept_view(node, &pkt, cid, view, announce),
            TableUpdate::Add { member, si_path } => self.accept_member(node, &pkt, cid, member, si_path),
        }
    }

    fn accept_view(
        &mut self,
        node: usize,
        pkt: &PacketEnvelope,
        cid: CommunityId,
        mut view: CommunityView,
        announce: bool,
    ) {
        if self.nodes[node].memberships.contains_key(&cid) {
            self.metrics.duplicates_suppressed += 1;
            return;
        }
        let Some(mid) = self.nodes[node].pending_joins.remove(&cid) else {
            self.reject_packet(node, pkt, "not_joining");
            return;
        };
        let travelled = pkt.travelled();
        if !view.contains(&mid) {
            // reply from an ordinary member: go through that member
            let sender = pkt.origin_machine.clone().and_then(|s| view.si_path(&s));
            let Some(to_sender) = sender else {
                self.reject_packet(node, pkt, "bad_view");
                return;
            };
            view.si_paths.insert(mid.clone(), to_sender.splice(&travelled));
        }
        let machine = self.nodes[node].host.get_mut(&mid).expect("pending machine exists");
        if let Err(e) = machine.join(cid.clone()) {
            self.trace_ev(
                node,
                "JOIN_SKIP",
                Some(pkt.packet_id),
                vec![("reason", quote(&e.to_string()))],
            );
            return;
        }
        let mut known = view_graph(&view);
        known.add_path(&travelled);
        let me = self.node_id(node);
        for n in self.live_neighbors(node) {
            known.add_edge(&me, &self.node_id(n));
        }
        let table = member_table(&mid, &view, &known);
        for (_, p) in table.iter() {
            self.note_install(p);
        }
        let my_si_path = view.si_path(&mid).expect("own path present");
        let targets: Vec<(MachineId, Path)> = if announce {
            let sender_is_si = pkt.src == view.si.node;
            table
                .iter()
                .filter(|(m, _)| !(sender_is_si && **m == view.si))
                .map(|(m, p)| (m.clone(), p.clone()))
                .collect()
        } else {
            Vec::new()
        };
        self.trace_ev(
            node,
            "JOINED",
            Some(pkt.packet_id),
            vec![("cid", cid.to_string()), ("rows", table.len().to_string())],
        );
        self.nodes[node].memberships.insert(
            cid.clone(),
            Membership {
                machine: mid.clone(),
                view,
                known,
                table,
                is_si: false,
            },
        );
        for (_, path) in targets {
            self.send_table(
                node,
                path,
                &cid,
                TableUpdate::Add {
                    member: mid.clone(),
                    si_path: my_si_path.clone(),
                },
            );
        }
        for held in self.nodes[node].early_adds.remove(&cid).unwrap_or_default() {
            self.on_table(node, held);
        }
    }

    fn accept_member(&mut self, node: usize, pkt: &PacketEnvelope, cid: CommunityId, member: MachineId, si_path: Path) {
        let me = self.node_id(node);
        if !self.nodes[node].memberships.contains_key(&cid) && self.nodes[node].pending_joins.contains_key(&cid) {
            self.trace_ev(node, "TABLE_HOLD", Some(pkt.packet_id), vec![("cid", cid.to_string())]);
            self.nodes[node].early_adds.entry(cid).or_default().push(pkt.clone());
            return;
        }
        let Some(m) = self.nodes[node].memberships.get_mut(&cid) else {
            self.reject_packet(node, pkt, "not_member");
            return;
        };
        let back = pkt.travelled().reversed();
        m.view.si_paths.entry(member.clone()).or_insert(si_path.clone());
        m.known.add_path(&si_path);
        m.known.add_path(&back);
        let path = if m.is_si {
            back
        } else {
            m.known.shortest(&me, &member.node).unwrap_or(back)
        };
        let better = m.table.get(&member).is_none_or(|old| better_path(&path, old));
        if better {
            let _ = m.table.insert(member.clone(), path.clone());
            self.note_install(&path);
        }
        if let Some(si) = self.initiators.get_mut(&cid).filter(|s| s.node == me) {
            si.joiners.entry(member).or_insert(si_path);
        }
    }

    /// Requests membership in an already running community.
    pub fn late_join(&mut self, node: usize, cid: &CommunityId) -> Result<(), CommunityError> {
        let Some(culture) = self.society.lookup(cid).cloned() else {
            return Err(CommunityError::NoSuchCommunity(cid.clone()));
        };
        if self.is_adversary(node) {
            return Err(CommunityError::Adversary(self.node_id(node)));
        }
        if self.nodes[node].memberships.contains_key(cid) || self.nodes[node].pending_joins.contains_key(cid) {
            return Ok(());
        }
        let registry = &self.world.registry;
        let mid = self.nodes[node]
            .host
            .instantiate(registry, culture.name())?
            .mid()
            .clone();
        self.nodes[node].pending_joins.insert(cid.clone(), mid.clone());
        let mut pkt = self.new_packet(PacketKind::McJoin, node, Destination::Broadcast);
        pkt.cid = Some(cid.clone());
        pkt.origin_machine = Some(mid.clone());
        pkt.body = Body::Join {
            member: mid,
            late: true,
        };
        self.broadcast(node, pkt);
        Ok(())
    }

    /// First copy of a flooded late `MCJOIN`: members answer, others relay.
    pub(crate) fn on_join_flood(&mut self, node: usize, pkt: PacketEnvelope) {
        let Some(cid) = pkt.cid.clone() else { return };
        if let Some(m) = self.nodes[node].memberships.get(&cid) {
            let view = m.view.clone();
            let path = pkt.travelled().reversed();
            self.send_table(node, path, &cid, TableUpdate::Full { view, announce: true });
            return;
        }
        self.rebroadcast(node, pkt);
    }
}

/// Row preference: fewer hops, then lexicographically smaller node indices.
pub fn better_path(new: &Path, old: &Path) -> bool {
    let key = |p: &Path| (p.hop_count(), p.hops().iter().map(NodeId::index).collect::<Vec<_>>());
    key(new) < key(old)
}

pub(crate) fn quote(s: &str) -> String {
    s.replace(' ', "_")
}
