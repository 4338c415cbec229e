//! Shared vocabulary: identifiers, source-routed paths, packets and the two
//! kinds of tables every node keeps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::community::CommunityView;
use crate::routing::{HelloBeacon, RouteReply, RouteRequest};

/// A node of the simulated network.
///
/// Equality, hashing and ordering use the dense index only; labels are
/// unique within a scenario so the two never disagree.
#[derive(Clone)]
pub struct NodeId {
    index: u32,
    label: Arc<str>,
}

impl NodeId {
    pub fn new(index: u32, label: impl Into<Arc<str>>) -> Self {
        NodeId {
            index,
            label: label.into(),
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn idx(&self) -> usize {
        self.index as usize
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl PartialEq for NodeId {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
    }
}

impl Eq for NodeId {}

impl std::hash::Hash for NodeId {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.index.hash(state)
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.index.cmp(&other.index)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.label, self.index)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Community identifier such as `C1`.
///
/// Ordered by length first so that minted identifiers sort numerically
/// (`C2` before `C10`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CommunityId(Arc<str>);

impl CommunityId {
    pub fn new(label: impl Into<Arc<str>>) -> Self {
        CommunityId(label.into())
    }

    /// The identifier minted for the `n`-th community of a society.
    pub fn minted(n: u32) -> Self {
        CommunityId(format!("C{n}").into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl PartialOrd for CommunityId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CommunityId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.len(), &*self.0).cmp(&(other.0.len(), &*other.0))
    }
}

impl fmt::Debug for CommunityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CommunityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `MID`: a machine is identified by its host and a per-host ordinal.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct MachineId {
    pub node: NodeId,
    pub ordinal: u32,
}

impl MachineId {
    pub fn new(node: NodeId, ordinal: u32) -> Self {
        MachineId { node, ordinal }
    }
}

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.ordinal)
    }
}

/// `MC`: the name of the culture a machine instantiates.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct MachineCulture(Arc<str>);

impl MachineCulture {
    pub fn new(name: impl Into<Arc<str>>) -> Self {
        MachineCulture(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MachineCulture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("malformed path {text:?}: {reason}")]
    Malformed { text: String, reason: String },
}

impl PathError {
    fn malformed(text: &str, reason: impl Into<String>) -> Self {
        PathError::Malformed {
            text: text.to_string(),
            reason: reason.into(),
        }
    }
}

/// Resolves node labels, used when reading paths out of text.
pub trait NodeLookup {
    fn lookup(&self, label: &str) -> Option<NodeId>;
}

impl NodeLookup for [NodeId] {
    fn lookup(&self, label: &str) -> Option<NodeId> {
        self.iter().find(|n| n.label() == label).cloned()
    }
}

impl NodeLookup for Vec<NodeId> {
    fn lookup(&self, label: &str) -> Option<NodeId> {
        self.as_slice().lookup(label)
    }
}

/// Adjacency oracle used to check that a path is a walk in some topology.
pub trait Adjacency {
    fn adjacent(&self, a: &NodeId, b: &NodeId) -> bool;
}

/// A loop-free source route. The first hop is the node that owns it.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Path {
    hops: Vec<NodeId>,
}

impl Path {
    pub fn new(hops: Vec<NodeId>) -> Result<Self, PathError> {
        if hops.is_empty() {
            return Err(PathError::malformed("", "empty path"));
        }
        let mut seen = BTreeSet::new();
        for h in &hops {
            if !seen.insert(h.index()) {
                let text = hops.iter().map(|n| n.label()).collect::<Vec<_>>().join("-");
                return Err(PathError::malformed(&text, format!("repeated hop {h}")));
            }
        }
        Ok(Path { hops })
    }

    pub fn single(node: NodeId) -> Self {
        Path { hops: vec![node] }
    }

    pub fn hops(&self) -> &[NodeId] {
        &self.hops
    }

    pub fn first(&self) -> &NodeId {
        &self.hops[0]
    }

    pub fn last(&self) -> &NodeId {
        self.hops.last().expect("paths are never empty")
    }

    /// Number of links, one less than the number of nodes.
    pub fn hop_count(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.hops.contains(node)
    }

    pub fn reversed(&self) -> Path {
        let mut hops = self.hops.clone();
        hops.reverse();
        Path { hops }
    }

    pub fn edges(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        self.hops.windows(2).map(|w| (&w[0], &w[1]))
    }

    /// Whether the undirected link `a`-`b` appears anywhere along the path.
    pub fn uses_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        self.edges().any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    pub fn is_walk_in(&self, adj: &impl Adjacency) -> bool {
        self.edges().all(|(a, b)| adj.adjacent(a, b))
    }

    /// Joins `self` (ending at X) with `next` (starting at X) and erases any
    /// loop the concatenation creates, so the result is again loop-free.
    ///
    /// Every consecutive pair of the result was consecutive in one of the
    /// inputs.
    pub fn splice(&self, next: &Path) -> Path {
        debug_assert_eq!(self.last(), next.first(), "splice endpoints must meet");
        let mut out: Vec<NodeId> = Vec::with_capacity(self.hops.len() + next.hops.len());
        for node in self.hops.iter().chain(next.hops.iter().skip(1)) {
            if let Some(pos) = out.iter().position(|n| n == node) {
                out.truncate(pos + 1);
            } else {
                out.push(node.clone());
            }
        }
        Path { hops: out }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, h) in self.hops.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            f.write_str(h.label())?;
        }
        Ok(())
    }
}

/// Reads the dash-separated form `N1-N2-N4`.
pub fn parse_path<L: NodeLookup + ?Sized>(text: &str, nodes: &L) -> Result<Path, PathError> {
    if text.trim().is_empty() {
        return Err(PathError::malformed(text, "empty path"));
    }
    let mut hops = Vec::new();
    for label in text.split('-') {
        let label = label.trim();
        if label.is_empty() {
            return Err(PathError::malformed(text, "empty label"));
        }
        let node = nodes
            .lookup(label)
            .ok_or_else(|| PathError::malformed(text, format!("unknown label {label}")))?;
        hops.push(node);
    }
    Path::new(hops).map_err(|_| PathError::malformed(text, "repeated hop"))
}

pub fn format_path(path: &Path) -> String {
    path.to_string()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum PacketKind {
    McStart,
    McJoin,
    /// Community-table dissemination and table updates.
    Table,
    Rreq,
    Rrep,
    Rerr,
    Hello,
    Friend,
    Data,
}

impl PacketKind {
    pub const ALL: [PacketKind; 9] = [
        PacketKind::McStart,
        PacketKind::McJoin,
        PacketKind::Table,
        PacketKind::Rreq,
        PacketKind::Rrep,
        PacketKind::Rerr,
        PacketKind::Hello,
        PacketKind::Friend,
        PacketKind::Data,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::McStart => "MCSTART",
            PacketKind::McJoin => "MCJOIN",
            PacketKind::Table => "TABLE",
            PacketKind::Rreq => "RREQ",
            PacketKind::Rrep => "RREP",
            PacketKind::Rerr => "RERR",
            PacketKind::Hello => "HELLO",
            PacketKind::Friend => "FRIEND",
            PacketKind::Data => "DATA",
        }
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Destination {
    Node(NodeId),
    Broadcast,
}

impl Destination {
    pub fn is_broadcast(&self) -> bool {
        matches!(self, Destination::Broadcast)
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Node(n) => write!(f, "{n}"),
            Destination::Broadcast => f.write_str("*"),
        }
    }
}

/// What a table packet carries.
#[derive(Clone, Debug)]
pub enum TableUpdate {
    /// The whole community as seen from the initiator.
    Full {
        view: CommunityView,
        /// The receiver must announce itself to the members it learns about.
        announce: bool,
    },
    /// A member announcing itself with its initiator-relative path.
    Add { member: MachineId, si_path: Path },
}

/// Kind-specific contents of a packet.
#[derive(Clone, Debug)]
pub enum Body {
    Empty,
    Announce {
        culture: MachineCulture,
    },
    Join {
        member: MachineId,
        late: bool,
    },
    Table(TableUpdate),
    Request(RouteRequest),
    Reply(RouteReply),
    RouteError {
        a: NodeId,
        b: NodeId,
    },
    Hello(HelloBeacon),
    Friend(Box<PacketEnvelope>),
    Data {
        dest_machine: Option<MachineId>,
        /// Intended receiver of a baseline flood.
        target: Option<NodeId>,
        session: Option<u64>,
    },
}

/// Every transmission in the simulator, control or data.
#[derive(Clone, Debug)]
pub struct PacketEnvelope {
    pub packet_id: u64,
    pub kind: PacketKind,
    pub op_code: String,
    pub cid: Option<CommunityId>,
    pub src: NodeId,
    pub dst: Destination,
    pub origin_machine: Option<MachineId>,
    /// Starts as `[src]`; every receiver appends itself.
    pub hop_trace: Vec<NodeId>,
    /// Source route for unicast packets; `None` for broadcasts.
    pub route: Option<Path>,
    pub payload_bytes: u64,
    pub payload: Vec<u8>,
    pub seq: Option<u64>,
    pub body: Body,
}

impl PacketEnvelope {
    pub fn new(packet_id: u64, kind: PacketKind, src: NodeId, dst: Destination) -> Self {
        PacketEnvelope {
            packet_id,
            kind,
            op_code: kind.name().to_string(),
            cid: None,
            hop_trace: vec![src.clone()],
            src,
            dst,
            origin_machine: None,
            route: None,
            payload_bytes: 0,
            payload: Vec::new(),
            seq: None,
            body: Body::Empty,
        }
    }

    /// The route the packet actually travelled so far.
    pub fn travelled(&self) -> Path {
        Path::new(self.hop_trace.clone()).expect("hop traces never revisit a node")
    }

    /// Next hop along the source route, if any.
    pub fn next_hop(&self) -> Option<&NodeId> {
        self.route.as_ref().and_then(|r| r.hops().get(self.hop_trace.len()))
    }
}

/// A fixed-length digest over a canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        let out = Sha256::digest(bytes);
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        Digest(d)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Tables with a canonical, order-independent text encoding.
pub trait CanonicalRows {
    fn canonical(&self) -> String;
}

pub fn table_digest<T: CanonicalRows + ?Sized>(table: &T) -> Digest {
    Digest::of(table.canonical().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("table owner {0} cannot be a row of its own table")]
    OwnerRow(NodeId),
    #[error("path {path} does not start at table owner {owner}")]
    ForeignPath { owner: NodeId, path: String },
}

/// One row of a community table as it is printed.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TableRow {
    pub mid: MachineId,
    pub cid: CommunityId,
    pub path: Path,
}

impl fmt::Display for TableRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.mid.node, self.cid, self.path)
    }
}

/// `CT`: the owner's source routes to the other members of one community.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommunityTable {
    owner: NodeId,
    cid: CommunityId,
    rows: BTreeMap<MachineId, Path>,
}

impl CommunityTable {
    pub fn new(owner: NodeId, cid: CommunityId) -> Self {
        CommunityTable {
            owner,
            cid,
            rows: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn cid(&self) -> &CommunityId {
        &self.cid
    }

    pub fn insert(&mut self, mid: MachineId, path: Path) -> Result<Option<Path>, TableError> {
        if mid.node == self.owner {
            return Err(TableError::OwnerRow(self.owner.clone()));
        }
        if path.first() != &self.owner || path.last() != &mid.node {
            return Err(TableError::ForeignPath {
                owner: self.owner.clone(),
                path: path.to_string(),
            });
        }
        Ok(self.rows.insert(mid, path))
    }

    pub fn get(&self, mid: &MachineId) -> Option<&Path> {
        self.rows.get(mid)
    }

    /// Row whose member lives on `node`.
    pub fn get_by_node(&self, node: &NodeId) -> Option<(&MachineId, &Path)> {
        self.rows.iter().find(|(m, _)| &m.node == node)
    }

    pub fn remove(&mut self, mid: &MachineId) -> Option<Path> {
        self.rows.remove(mid)
    }

    /// Drops every row routed over `a`-`b`; returns the dropped members.
    pub fn invalidate_edge(&mut self, a: &NodeId, b: &NodeId) -> Vec<MachineId> {
        let gone: Vec<MachineId> = self
            .rows
            .iter()
            .filter(|(_, p)| p.uses_edge(a, b))
            .map(|(m, _)| m.clone())
            .collect();
        for m in &gone {
            self.rows.remove(m);
        }
        gone
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MachineId, &Path)> {
        self.rows.iter()
    }

    pub fn rows(&self) -> Vec<TableRow> {
        self.rows
            .iter()
            .map(|(mid, path)| TableRow {
                mid: mid.clone(),
                cid: self.cid.clone(),
                path: path.clone(),
            })
            .collect()
    }

    pub fn digest(&self) -> Digest {
        table_digest(self)
    }
}

impl CanonicalRows for CommunityTable {
    fn canonical(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            out.push_str(&format!(
                "{}/{}\t{}\t{}\n",
                row.mid.node, row.mid.ordinal, row.cid, row.path
            ));
        }
        out
    }
}

/// `ST`: network-wide registry from community to machine culture.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SocietyTable {
    rows: BTreeMap<CommunityId, MachineCulture>,
}

impl SocietyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` when the community is already registered.
    pub fn register(&mut self, cid: CommunityId, culture: MachineCulture) -> bool {
        if self.rows.contains_key(&cid) {
            return false;
        }
        self.rows.insert(cid, culture);
        true
    }

    pub fn lookup(&self, cid: &CommunityId) -> Option<&MachineCulture> {
        self.rows.get(cid)
    }

    pub fn contains(&self, cid: &CommunityId) -> bool {
        self.rows.contains_key(cid)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CommunityId, &MachineCulture)> {
        self.rows.iter()
    }

    pub fn digest(&self) -> Digest {
        table_digest(self)
    }
}

impl CanonicalRows for SocietyTable {
    fn canonical(&self) -> String {
        self.rows.iter().map(|(cid, mc)| format!("{cid}\t{mc}\n")).collect()
    }
}

/// Scenario-independent helper for tests and examples: nodes `labels[i]`
/// with index `i`.
pub fn nodes_from_labels(labels: &[&str]) -> Vec<NodeId> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| NodeId::new(i as u32, *l))
        .collect()
}
