//! Scenario documents (`.scn`, TOML) and their validated form.
//!
//! A scenario names the nodes and links, declares arts and cultures, says
//! which nodes care about which cultures, and lists timed steps.
//!
//! ```
//! let text = r#"
//! [topology]
//! nodes = ["A", "B"]
//! edges = ["A-B"]
//!
//! [[culture]]
//! name = "File service"
//! application = "FTP"
//!
//! [interest]
//! B = ["File service"]
//!
//! [[step]]
//! at = 0
//! action = "start_service"
//! node = "A"
//! culture = "File service"
//! "#;
//! let world = hamanet::scenario::parse_scenario(text).unwrap();
//! assert_eq!(world.nodes.len(), 2);
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{ArtDef, ArtRegistry, CultureDef, Layer, NeedTag};
use crate::model::{CommunityId, NodeId};
use crate::sim::adversary::{AdversaryProfile, Behavior};
use crate::sim::link::LinkModel;
use crate::sim::time::SimTime;
use crate::sim::topology::Topology;

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Document {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub params: ParamsDoc,
    pub topology: TopologyDoc,
    #[serde(default)]
    pub link: LinkDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub art: Vec<ArtDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub culture: Vec<CultureDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub interest: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub file: Vec<FileDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversary: Vec<AdversaryDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step: Vec<StepDoc>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ParamsDoc {
    pub join_window: Option<f64>,
    pub rreq_timeout: Option<f64>,
    pub hello: Option<bool>,
    pub hello_interval: Option<f64>,
    pub queue_limit: Option<usize>,
    pub chunk_size: Option<u64>,
    pub end_time: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    pub nodes: Vec<String>,
    /// `"A-B"`, or a chain such as `"A-B-C"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub positions: BTreeMap<String, [f64; 2]>,
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gateways: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub edge_loss: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LinkDoc {
    pub physical: Option<String>,
    pub mac: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtDoc {
    pub name: String,
    pub layer: Layer,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    pub need: Option<NeedTag>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CultureDoc {
    pub name: String,
    pub physical: Option<String>,
    pub mac: Option<String>,
    pub routing: Option<String>,
    pub transport: Option<String>,
    pub application: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDoc {
    pub node: String,
    pub name: String,
    pub size: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    pub path: Option<String>,
    /// Literal contents, hex encoded.
    pub hex: Option<String>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryDoc {
    pub node: String,
    pub behavior: String,
    pub rate: Option<f64>,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub count: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDoc {
    pub at: f64,
    pub action: String,
    pub node: Option<String>,
    pub culture: Option<String>,
    pub cid: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
    pub op: Option<String>,
    pub bytes: Option<u64>,
    pub count: Option<u32>,
    pub interval: Option<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub mirror: bool,
    pub file: Option<String>,
    pub edge: Option<String>,
    pub loss: Option<f64>,
}

/// Run-wide protocol parameters in engine units.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub join_window: SimTime,
    pub rreq_timeout: SimTime,
    pub hello: bool,
    pub hello_interval: SimTime,
    pub queue_limit: usize,
    pub chunk_size: Option<u64>,
    pub end_time: SimTime,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            join_window: SimTime::from_units(10.0),
            rreq_timeout: SimTime::from_units(20.0),
            hello: false,
            hello_interval: SimTime::from_units(5.0),
            queue_limit: 64,
            chunk_size: None,
            end_time: SimTime::from_units(1000.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepAction {
    StartService {
        node: usize,
        culture: String,
    },
    LateJoin {
        node: usize,
        cid: CommunityId,
    },
    Send {
        from: usize,
        to: usize,
        cid: CommunityId,
        /// Defaults to the first operation the culture declares.
        op: Option<String>,
        bytes: u64,
        count: u32,
        interval: SimTime,
        /// Also part of the flooding baseline workload.
        mirror: bool,
    },
    Ftp {
        from: usize,
        to: usize,
        cid: CommunityId,
        file: String,
    },
    AddEdge {
        a: usize,
        b: usize,
    },
    RemoveEdge {
        a: usize,
        b: usize,
    },
    SetLoss {
        edge: Option<(usize, usize)>,
        loss: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub at: SimTime,
    pub action: StepAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostedFile {
    pub node: usize,
    pub name: String,
    pub content: Arc<Vec<u8>>,
    pub source: FileSource,
}

/// Where a hosted file's bytes came from, kept so a world can be written
/// back out as a scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum FileSource {
    Generated { seed: u64, size: u64 },
    Path(PathBuf),
    Inline,
}

/// A validated scenario, ready to simulate.
#[derive(Clone, Debug)]
pub struct World {
    pub name: String,
    pub nodes: Vec<NodeId>,
    pub topology: Topology,
    /// Per-edge loss overrides keyed by `(low, high)` index.
    pub edge_loss: BTreeMap<(usize, usize), f64>,
    pub registry: ArtRegistry,
    /// Channel used by packets that carry no community id.
    pub link: LinkModel,
    /// Art names `link` was built from.
    pub link_arts: (String, String),
    pub interests: Vec<BTreeSet<String>>,
    pub attributes: Vec<BTreeSet<String>>,
    pub files: Vec<HostedFile>,
    pub adversaries: Vec<AdversaryProfile>,
    pub steps: Vec<Step>,
    pub params: Params,
}

impl World {
    /// An empty world over `topology` with default parameters and no cultures.
    pub fn new(topology: Topology) -> Self {
        let n = topology.len();
        World {
            name: String::new(),
            nodes: topology.nodes().to_vec(),
            topology,
            edge_loss: BTreeMap::new(),
            registry: ArtRegistry::new(),
            link: LinkModel::default(),
            link_arts: ("FreeSpace".into(), "CSMA".into()),
            interests: vec![BTreeSet::new(); n],
            attributes: vec![BTreeSet::new(); n],
            files: Vec::new(),
            adversaries: Vec::new(),
            steps: Vec::new(),
            params: Params::default(),
        }
    }

    /// Registers a culture, pulling any missing arts from the presets.
    pub fn add_culture(&mut self, def: CultureDef) -> Result<(), crate::fabric::FabricError> {
        for art in def.slots.values() {
            if self.registry.art(art).is_none() {
                if let Some(p) = ArtDef::preset(art) {
                    self.registry.register_art(p)?;
                }
            }
        }
        self.registry.register_culture(def)
    }

    pub fn node(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label() == label)
    }

    pub fn interest(&mut self, node: usize, culture: &str) -> &mut Self {
        self.interests[node].insert(culture.to_string());
        self
    }

    pub fn step(&mut self, at: f64, action: StepAction) -> &mut Self {
        self.steps.push(Step {
            at: SimTime::from_units(at),
            action,
        });
        self
    }

    pub fn host_file(&mut self, node: usize, name: &str, content: Vec<u8>) -> &mut Self {
        self.files.push(HostedFile {
            node,
            name: name.to_string(),
            content: Arc::new(content),
            source: FileSource::Inline,
        });
        self
    }

    pub fn file(&self, node: usize, name: &str) -> Option<&HostedFile> {
        self.files.iter().find(|f| f.node == node && f.name == name)
    }
}

/// One problem found while validating, with the field it concerns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{} validation issue(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

impl ScenarioError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            ScenarioError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Reads and validates a scenario file. Relative file paths inside the
/// scenario resolve against the scenario's directory.
pub fn load_scenario(path: impl AsRef<FsPath>) -> Result<World, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().map(FsPath::to_path_buf);
    let mut world = validate(parse_document(&text)?, base.as_deref())?;
    if world.name.is_empty() {
        world.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(world)
}

pub fn parse_scenario(text: &str) -> Result<World, ScenarioError> {
    validate(parse_document(text)?, None)
}

pub fn parse_document(text: &str) -> Result<Document, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))
}

const DEFAULT_SLOTS: [(Layer, &str); 4] = [
    (Layer::Physical, "FreeSpace"),
    (Layer::Mac, "CSMA"),
    (Layer::Routing, "DSR"),
    (Layer::Transport, "TCP-abstract"),
];

struct Checker {
    issues: Vec<Issue>,
    nodes: Vec<NodeId>,
}

impl Checker {
    fn issue(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn node(&mut self, path: &str, label: Option<&str>) -> Option<usize> {
        match label {
            None => {
                self.issue(path, "missing");
                None
            }
            Some(l) => {
                let found = self.nodes.iter().position(|n| n.label() == l);
                if found.is_none() {
                    self.issue(path, format!("unknown node {l:?}"));
                }
                found
            }
        }
    }

    fn edge(&mut self, path: &str, text: &str) -> Option<(usize, usize)> {
        match text.split_once('-') {
            Some((a, b)) if !b.contains('-') => {
                let a = self.node(path, Some(a.trim()));
                let b = self.node(path, Some(b.trim()));
                match (a, b) {
                    (Some(a), Some(b)) if a == b => {
                        self.issue(path, "self-loop");
                        None
                    }
                    (Some(a), Some(b)) => Some((a.min(b), a.max(b))),
                    _ => None,
                }
            }
            _ => {
                self.issue(path, format!("expected an edge like \"A-B\", got {text:?}"));
                None
            }
        }
    }

    fn time(&mut self, path: &str, v: f64) -> SimTime {
        if !v.is_finite() || v < 0.0 {
            self.issue(path, "must be a non-negative number");
        }
        SimTime::from_units(v)
    }

    fn positive(&mut self, path: &str, v: Option<f64>, default: SimTime) -> SimTime {
        match v {
            None => default,
            Some(x) if x.is_finite() && x > 0.0 => SimTime::from_units(x),
            Some(_) => {
                self.issue(path, "must be positive");
                default
            }
        }
    }

    fn probability(&mut self, path: &str, p: f64) {
        if !(0.0..=1.0).contains(&p) {
            self.issue(path, format!("probability {p} outside [0, 1]"));
        }
    }
}

/// Checks a parsed document and resolves it into a [`World`]. Every problem
/// is reported; validation does not stop at the first one.
pub fn validate(doc: Document, base: Option<&FsPath>) -> Result<World, ScenarioError> {
    let mut c = Checker {
        issues: Vec::new(),
        nodes: Vec::new(),
    };

    let mut seen = BTreeSet::new();
    for (i, label) in doc.topology.nodes.iter().enumerate() {
        let bad = label.is_empty()
            || label
                .chars()
                .any(|ch| ch.is_whitespace() || ch == '-' || ch == '=' || ch == '/');
        if bad {
            c.issue(format!("topology.nodes[{i}]"), format!("invalid label {label:?}"));
        }
        if !seen.insert(label.as_str()) {
            c.issue(format!("topology.nodes[{i}]"), format!("duplicate node {label:?}"));
        }
        c.nodes.push(NodeId::new(i as u32, label.as_str()));
    }
    if c.nodes.is_empty() {
        c.issue("topology.nodes", "at least one node is required");
    }

    let topology = if doc.topology.positions.is_empty() {
        let mut t = Topology::new(c.nodes.clone());
        if doc.topology.radius.is_some() {
            c.issue("topology.radius", "radius needs positions");
        }
        for (i, chain) in doc.topology.edges.iter().enumerate() {
            let path = format!("topology.edges[{i}]");
            let labels: Vec<&str> = chain.split('-').map(str::trim).collect();
            if labels.len() < 2 {
                c.issue(&path, format!("expected \"A-B\" or a chain, got {chain:?}"));
                continue;
            }
            for w in labels.windows(2) {
                let (a, b) = (c.node(&path, Some(w[0])), c.node(&path, Some(w[1])));
                if let (Some(a), Some(b)) = (a, b) {
                    if t.add_edge(a, b).is_err() {
                        c.issue(&path, "self-loop");
                    }
                }
            }
        }
        t
    } else {
        let mut pos = Vec::with_capacity(c.nodes.len());
        for n in c.nodes.clone() {
            match doc.topology.positions.get(n.label()) {
                Some(p) => pos.push((p[0], p[1])),
                None => {
                    c.issue(format!("topology.positions.{n}"), "missing position");
                    pos.push((f64::INFINITY, f64::INFINITY));
                }
            }
        }
        for label in doc.topology.positions.keys() {
            if !c.nodes.iter().any(|n| n.label() == label) {
                c.issue(format!("topology.positions.{label}"), "unknown node");
            }
        }
        let radius = match doc.topology.radius {
            Some(r) if r > 0.0 => r,
            _ => {
                c.issue("topology.radius", "positions need a positive radius");
                0.0
            }
        };
        if !doc.topology.edges.is_empty() {
            c.issue("topology.edges", "give either edges or positions, not both");
        }
        Topology::geometric(c.nodes.clone(), &pos, radius)
    };

    let n = c.nodes.len();
    let mut attributes = vec![BTreeSet::new(); n];
    for (i, g) in doc.topology.gateways.iter().enumerate() {
        if let Some(x) = c.node(&format!("topology.gateways[{i}]"), Some(g)) {
            attributes[x].insert("gateway".to_string());
        }
    }
    for (label, attrs) in &doc.attributes {
        if let Some(x) = c.node(&format!("attributes.{label}"), Some(label)) {
            attributes[x].extend(attrs.iter().cloned());
        }
    }

    let mut edge_loss = BTreeMap::new();
    for (e, p) in &doc.topology.edge_loss {
        let path = format!("topology.edge_loss.{e}");
        c.probability(&path, *p);
        if let Some(k) = c.edge(&path, e) {
            edge_loss.insert(k, *p);
        }
    }

    // arts: declared first, presets on demand
    let mut registry = ArtRegistry::new();
    for (i, a) in doc.art.iter().enumerate() {
        let path = format!("art[{i}]");
        let mut def = ArtDef::new(&a.name, a.layer).with_ops(a.ops.iter().cloned());
        def.params = a.params.clone();
        def.need_tag = a.need;
        check_art_params(&mut c, &path, &def);
        if let Err(e) = registry.register_art(def) {
            c.issue(path, e.to_string());
        }
    }
    let want_art = |c: &mut Checker, registry: &mut ArtRegistry, path: &str, name: &str| {
        if registry.art(name).is_some() {
            return;
        }
        match ArtDef::preset(name) {
            Some(p) => registry.register_art(p).expect("preset names are unique"),
            None => c.issue(path, format!("unknown art {name:?}")),
        }
    };
    let link_phys = doc.link.physical.clone().unwrap_or_else(|| "FreeSpace".into());
    let link_mac = doc.link.mac.clone().unwrap_or_else(|| "CSMA".into());
    want_art(&mut c, &mut registry, "link.physical", &link_phys);
    want_art(&mut c, &mut registry, "link.mac", &link_mac);
    for (i, cd) in doc.culture.iter().enumerate() {
        let path = format!("culture[{i}]");
        let mut def = CultureDef::new(&cd.name);
        let given = [
            (Layer::Physical, &cd.physical),
            (Layer::Mac, &cd.mac),
            (Layer::Routing, &cd.routing),
            (Layer::Transport, &cd.transport),
            (Layer::Application, &cd.application),
        ];
        for (layer, art) in given {
            let name = match art {
                Some(a) => a.clone(),
                None => match DEFAULT_SLOTS.iter().find(|(l, _)| *l == layer) {
                    Some((_, d)) => d.to_string(),
                    None => {
                        c.issue(format!("{path}.application"), "missing");
                        continue;
                    }
                },
            };
            let slot_path = format!("{path}.{}", layer.to_string().to_lowercase());
            want_art(&mut c, &mut registry, &slot_path, &name);
            def = def.slot(layer, name);
        }
        for r in &cd.requires {
            def = def.requiring(r.clone());
        }
        if def.slots.len() == Layer::ALL.len() {
            if let Err(e) = registry.register_culture(def) {
                c.issue(path, e.to_string());
            }
        }
    }
    let link = {
        let (p, m) = (registry.art(&link_phys), registry.art(&link_mac));
        for (label, art, layer) in [("link.physical", p, Layer::Physical), ("link.mac", m, Layer::Mac)] {
            if let Some(a) = art {
                if a.layer != layer {
                    c.issue(label, format!("art {:?} is not a {layer} art", a.name));
                }
            }
        }
        LinkModel::from_arts(p, m)
    };

    let mut interests = vec![BTreeSet::new(); n];
    for (label, cultures) in &doc.interest {
        let path = format!("interest.{label}");
        let x = c.node(&path, Some(label));
        for cu in cultures {
            if registry.culture(cu).is_none() {
                c.issue(&path, format!("unknown culture {cu:?}"));
            }
            if let Some(x) = x {
                interests[x].insert(cu.clone());
            }
        }
    }

    let mut files = Vec::new();
    for (i, f) in doc.file.iter().enumerate() {
        let path = format!("file[{i}]");
        let node = c.node(&format!("{path}.node"), Some(&f.node));
        let content = match (&f.path, f.size, &f.hex) {
            (Some(p), None, None) => {
                let full = match base {
                    Some(b) => b.join(p),
                    None => p.into(),
                };
                match std::fs::read(&full) {
                    Ok(bytes) => Some((bytes, FileSource::Path(std::path::absolute(&full).unwrap_or(full)))),
                    Err(e) => {
                        c.issue(format!("{path}.path"), format!("{}: {e}", full.display()));
                        None
                    }
                }
            }
            (None, Some(size), None) => Some((
                generated_content(f.seed, size),
                FileSource::Generated { seed: f.seed, size },
            )),
            (None, None, Some(h)) => match hex::decode(h) {
                Ok(bytes) => Some((bytes, FileSource::Inline)),
                Err(e) => {
                    c.issue(format!("{path}.hex"), e.to_string());
                    None
                }
            },
            (None, None, None) => {
                c.issue(&path, "needs one of size, path or hex");
                None
            }
            _ => {
                c.issue(&path, "give only one of size, path or hex");
                None
            }
        };
        if let (Some(node), Some((content, source))) = (node, content) {
            if files.iter().any(|h: &HostedFile| h.node == node && h.name == f.name) {
                c.issue(&path, format!("duplicate file {:?} on {}", f.name, f.node));
            }
            files.push(HostedFile {
                node,
                name: f.name.clone(),
                content: Arc::new(content),
                source,
            });
        }
    }

    let mut adversaries = Vec::new();
    for (i, a) in doc.adversary.iter().enumerate() {
        let path = format!("adversary[{i}]");
        let node = c.node(&format!("{path}.node"), Some(&a.node));
        let behavior = match a.behavior.parse::<Behavior>() {
            Ok(b) => Some(b),
            Err(e) => {
                c.issue(format!("{path}.behavior"), e);
                None
            }
        };
        if let Some(r) = a.rate {
            if !(r.is_finite() && r > 0.0) {
                c.issue(format!("{path}.rate"), "must be positive");
            }
        }
        let start = c.time(&format!("{path}.start"), a.start.unwrap_or(0.0));
        let stop = a.stop.map(|s| c.time(&format!("{path}.stop"), s));
        if stop.is_some_and(|s| s < start) {
            c.issue(format!("{path}.stop"), "stop precedes start");
        }
        if let (Some(x), Some(behavior)) = (node, behavior) {
            if adversaries.iter().any(|p: &AdversaryProfile| p.node.idx() == x) {
                c.issue(&path, "node already has an adversary profile");
            }
            adversaries.push(AdversaryProfile {
                node: c.nodes[x].clone(),
                behavior,
                rate: a.rate.unwrap_or(1.0),
                start,
                stop,
                count: a.count,
            });
        }
    }

    let defaults = Params::default();
    let p = &doc.params;
    let params = Params {
        join_window: c.positive("params.join_window", p.join_window, defaults.join_window),
        rreq_timeout: c.positive("params.rreq_timeout", p.rreq_timeout, defaults.rreq_timeout),
        hello: p.hello.unwrap_or(defaults.hello),
        hello_interval: c.positive("params.hello_interval", p.hello_interval, defaults.hello_interval),
        queue_limit: p.queue_limit.unwrap_or(defaults.queue_limit),
        chunk_size: match p.chunk_size {
            Some(0) => {
                c.issue("params.chunk_size", "must be positive");
                None
            }
            other => other,
        },
        end_time: c.positive("params.end_time", p.end_time, defaults.end_time),
    };

    let mut steps = Vec::new();
    for (i, s) in doc.step.iter().enumerate() {
        let path = format!("step[{i}]");
        let at = c.time(&format!("{path}.at"), s.at);
        if let Some(action) = resolve_step(&mut c, &registry, &path, s) {
            steps.push(Step { at, action });
        }
    }

    if !c.issues.is_empty() {
        return Err(ScenarioError::Invalid(c.issues));
    }
    Ok(World {
        name: doc.name.unwrap_or_default(),
        nodes: c.nodes,
        topology,
        edge_loss,
        registry,
        link,
        link_arts: (link_phys, link_mac),
        interests,
        attributes,
        files,
        adversaries,
        steps,
        params,
    })
}

fn check_art_params(c: &mut Checker, path: &str, def: &ArtDef) {
    for (k, v) in &def.params {
        let p = format!("{path}.params.{k}");
        if !v.is_finite() {
            c.issue(&p, "must be finite");
            continue;
        }
        match k.as_str() {
            // flood tie-breaking relies on strictly positive delays
            "delay" if *v <= 0.0 => c.issue(&p, "must be positive"),
            "loss" => c.probability(&p, *v),
            "contention" if *v < 0.0 => c.issue(&p, "must be non-negative"),
            "window" | "retries" | "chunk_size" if *v < 1.0 => c.issue(&p, "must be at least 1"),
            "rto" if *v <= 0.0 => c.issue(&p, "must be positive"),
            _ => {}
        }
    }
}

fn resolve_step(c: &mut Checker, registry: &ArtRegistry, path: &str, s: &StepDoc) -> Option<StepAction> {
    let field = |name: &str| format!("{path}.{name}");
    let cid = |c: &mut Checker| match &s.cid {
        Some(x) if !x.is_empty() => Some(CommunityId::new(x.as_str())),
        _ => {
            c.issue(field("cid"), "missing");
            None
        }
    };
    let action = match s.action.as_str() {
        "start_service" => {
            let node = c.node(&field("node"), s.node.as_deref());
            let culture = match &s.culture {
                Some(cu) if registry.culture(cu).is_some() => Some(cu.clone()),
                Some(cu) => {
                    c.issue(field("culture"), format!("unknown culture {cu:?}"));
                    None
                }
                None => {
                    c.issue(field("culture"), "missing");
                    None
                }
            };
            StepAction::StartService {
                node: node?,
                culture: culture?,
            }
        }
        "late_join" => {
            let node = c.node(&field("node"), s.node.as_deref());
            let cid = cid(c);
            StepAction::LateJoin { node: node?, cid: cid? }
        }
        "send" => {
            let from = c.node(&field("from"), s.from.as_deref());
            let to = c.node(&field("to"), s.to.as_deref());
            let cid = cid(c);
            if s.count == Some(0) {
                c.issue(field("count"), "must be at least 1");
            }
            let interval = c.time(&field("interval"), s.interval.unwrap_or(1.0));
            StepAction::Send {
                from: from?,
                to: to?,
                cid: cid?,
                op: s.op.clone(),
                bytes: s.bytes.unwrap_or(64),
                count: s.count.unwrap_or(1),
                interval,
                mirror: s.mirror,
            }
        }
        "ftp" => {
            let from = c.node(&field("from"), s.from.as_deref());
            let to = c.node(&field("to"), s.to.as_deref());
            let cid = cid(c);
            if s.file.is_none() {
                c.issue(field("file"), "missing");
            }
            StepAction::Ftp {
                from: from?,
                to: to?,
                cid: cid?,
                file: s.file.clone()?,
            }
        }
        "add_edge" | "remove_edge" => {
            let (a, b) = match &s.edge {
                Some(e) => c.edge(&field("edge"), e)?,
                None => {
                    c.issue(field("edge"), "missing");
                    return None;
                }
            };
            if s.action == "add_edge" {
                StepAction::AddEdge { a, b }
            } else {
                StepAction::RemoveEdge { a, b }
            }
        }
        "set_loss" => {
            let loss = match s.loss {
                Some(p) => {
                    c.probability(&field("loss"), p);
                    p
                }
                None => {
                    c.issue(field("loss"), "missing");
                    return None;
                }
            };
            let edge = match &s.edge {
                Some(e) => Some(c.edge(&field("edge"), e)?),
                None => None,
            };
            StepAction::SetLoss { edge, loss }
        }
        other => {
            c.issue(field("action"), format!("unknown action {other:?}"));
            return None;
        }
    };
    Some(action)
}

/// Writes `world` back out as scenario text. Loading the result gives an
/// equivalent world, and emitting that again gives the same text.
///
/// Defaults and presets are spelled out, chains and positions become plain
/// edges, and every list is sorted.
pub fn emit_scenario(world: &World) -> String {
    let label = |i: usize| world.nodes[i].label().to_string();
    let edge = |(a, b): (usize, usize)| format!("{}-{}", label(a), label(b));
    let units = |t: SimTime| Some(t.as_units());
    let p = &world.params;
    let params = ParamsDoc {
        join_window: units(p.join_window),
        rreq_timeout: units(p.rreq_timeout),
        hello: Some(p.hello),
        hello_interval: units(p.hello_interval),
        queue_limit: Some(p.queue_limit),
        chunk_size: p.chunk_size,
        end_time: units(p.end_time),
    };
    let topology = TopologyDoc {
        nodes: world.nodes.iter().map(|n| n.label().to_string()).collect(),
        edges: world.topology.edges().into_iter().map(edge).collect(),
        positions: BTreeMap::new(),
        radius: None,
        gateways: Vec::new(),
        edge_loss: world.edge_loss.iter().map(|(e, p)| (edge(*e), *p)).collect(),
    };
    let art = world
        .registry
        .arts()
        .map(|a| ArtDoc {
            name: a.name.clone(),
            layer: a.layer,
            ops: a.op_codes.iter().cloned().collect(),
            params: a.params.clone(),
            need: a.need_tag,
        })
        .collect();
    let culture = world
        .registry
        .cultures()
        .map(|cu| {
            let slot = |l: Layer| cu.slots.get(&l).cloned();
            CultureDoc {
                name: cu.name.clone(),
                physical: slot(Layer::Physical),
                mac: slot(Layer::Mac),
                routing: slot(Layer::Routing),
                transport: slot(Layer::Transport),
                application: slot(Layer::Application),
                requires: cu.requires.iter().cloned().collect(),
            }
        })
        .collect();
    let per_node = |sets: &[BTreeSet<String>]| -> BTreeMap<String, Vec<String>> {
        sets.iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| (label(i), s.iter().cloned().collect()))
            .collect()
    };
    let mut files: Vec<FileDoc> = world
        .files
        .iter()
        .map(|f| {
            let mut doc = FileDoc {
                node: label(f.node),
                name: f.name.clone(),
                size: None,
                seed: 0,
                path: None,
                hex: None,
            };
            match &f.source {
                FileSource::Generated { seed, size } => {
                    doc.size = Some(*size);
                    doc.seed = *seed;
                }
                FileSource::Path(p) => doc.path = Some(p.display().to_string()),
                FileSource::Inline => doc.hex = Some(hex::encode(f.content.as_slice())),
            }
            doc
        })
        .collect();
    files.sort_by(|a, b| (&a.node, &a.name).cmp(&(&b.node, &b.name)));
    let adversary = world
        .adversaries
        .iter()
        .map(|a| AdversaryDoc {
            node: a.node.label().to_string(),
            behavior: a.behavior.name().to_string(),
            rate: Some(a.rate),
            start: units(a.start),
            stop: a.stop.map(SimTime::as_units),
            count: a.count,
        })
        .collect();
    let step = world.steps.iter().map(|s| emit_step(world, s)).collect();
    let doc = Document {
        name: Some(world.name.clone()).filter(|n| !n.is_empty()),
        params,
        topology,
        link: LinkDoc {
            physical: Some(world.link_arts.0.clone()),
            mac: Some(world.link_arts.1.clone()),
        },
        art,
        culture,
        interest: per_node(&world.interests),
        attributes: per_node(&world.attributes),
        file: files,
        adversary,
        step,
    };
    toml::to_string(&doc).expect("scenario documents serialize")
}

fn emit_step(world: &World, step: &Step) -> StepDoc {
    let label = |i: usize| Some(world.nodes[i].label().to_string());
    let mut doc = StepDoc {
        at: step.at.as_units(),
        action: String::new(),
        node: None,
        culture: None,
        cid: None,
        from: None,
        to: None,
        op: None,
        bytes: None,
        count: None,
        interval: None,
        mirror: false,
        file: None,
        edge: None,
        loss: None,
    };
    let edge = |a: usize, b: usize| Some(format!("{}-{}", world.nodes[a].label(), world.nodes[b].label()));
    doc.action = match &step.action {
        StepAction::StartService { node, culture } => {
            doc.node = label(*node);
            doc.culture = Some(culture.clone());
            "start_service"
        }
        StepAction::LateJoin { node, cid } => {
            doc.node = label(*node);
            doc.cid = Some(cid.to_string());
            "late_join"
        }
        StepAction::Send {
            from,
            to,
            cid,
            op,
            bytes,
            count,
            interval,
            mirror,
        } => {
            doc.from = label(*from);
            doc.to = label(*to);
            doc.cid = Some(cid.to_string());
            doc.op = op.clone();
            doc.bytes = Some(*bytes);
            doc.count = Some(*count);
            doc.interval = Some(interval.as_units());
            doc.mirror = *mirror;
            "send"
        }
        StepAction::Ftp { from, to, cid, file } => {
            doc.from = label(*from);
            doc.to = label(*to);
            doc.cid = Some(cid.to_string());
            doc.file = Some(file.clone());
            "ftp"
        }
        StepAction::AddEdge { a, b } => {
            doc.edge = edge(*a, *b);
            "add_edge"
        }
        StepAction::RemoveEdge { a, b } => {
            doc.edge = edge(*a, *b);
            "remove_edge"
        }
        StepAction::SetLoss { edge: e, loss } => {
            doc.edge = e.and_then(|(a, b)| edge(a, b));
            doc.loss = Some(*loss);
            "set_loss"
        }
    }
    .to_string();
    doc
}

/// Deterministic file bytes for `size`-byte generated files.
pub fn generated_content(seed: u64, size: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; size as usize];
    rng.fill_bytes(&mut out);
    out
}
