#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use hamanet::fabric::{ArtDef, CultureDef, Layer};
use hamanet::model::nodes_from_labels;
use hamanet::scenario::{load_scenario, StepAction, World};
use hamanet::sim::topology::Topology;
use hamanet::sim::trace::TraceLine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SCENARIOS: &[&str] = &["table4", "fig3", "fig4", "ftp", "adversary", "repair", "friend"];

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scn"))
}

pub fn scenario(name: &str) -> World {
    load_scenario(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn scenario_text(name: &str) -> String {
    std::fs::read_to_string(scenario_path(name)).unwrap()
}

/// Plain adjacency lists, kept separate from `Topology` so the oracles below
/// share no code with the simulator.
pub type Adj = Vec<Vec<usize>>;

pub fn bfs(adj: &Adj, from: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[from] = Some(0);
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        let d = dist[u].unwrap();
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

pub fn diameter(adj: &Adj) -> usize {
    (0..adj.len())
        .map(|s| bfs(adj, s).into_iter().flatten().max().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

pub fn adjacent(adj: &Adj, a: usize, b: usize) -> bool {
    adj[a].contains(&b)
}

/// A random connected graph: a random spanning tree plus extra edges with
/// probability `extra`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra: f64) -> Adj {
    let mut adj = vec![Vec::new(); n];
    let link = |adj: &mut Adj, a: usize, b: usize| {
        if a != b && !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    };
    for i in 1..n {
        let j = rng.random_range(0..i);
        link(&mut adj, i, j);
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(extra) {
                link(&mut adj, a, b);
            }
        }
    }
    adj
}

/// A single-culture world over `adj` where every node is interested and
/// `si` starts the service at t=0.
pub fn formation_world(adj: &Adj, si: usize) -> World {
    world_with(adj, si, CultureDef::file_service("File service"))
}

/// Like `formation_world`, but over a contention-free MAC so every flood
/// copy arrives along a shortest path.
pub fn slotted_world(adj: &Adj, si: usize) -> World {
    let culture = CultureDef::file_service("File service").slot(Layer::Mac, "TDMA");
    world_with(adj, si, culture)
}

fn world_with(adj: &Adj, si: usize, culture: CultureDef) -> World {
    let labels: Vec<String> = (1..=adj.len()).map(|i| format!("N{i}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut topo = Topology::new(nodes_from_labels(&refs));
    for (a, list) in adj.iter().enumerate() {
        for &b in list {
            if a < b {
                topo.add_edge(a, b).unwrap();
            }
        }
    }
    let mut world = World::new(topo);
    world.name = "random".into();
    world
        .registry
        .register_art(ArtDef::new("TDMA", Layer::Mac).with_param("contention", 0.0))
        .unwrap();
    world.add_culture(culture).unwrap();
    for i in 0..adj.len() {
        world.interest(i, "File service");
    }
    world.step(
        0.0,
        StepAction::StartService {
            node: si,
            culture: "File service".into(),
        },
    );
    world
}

pub fn random_formation(seed: u64, max_nodes: usize) -> (Adj, usize, World) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_nodes);
    let extra = rng.random_range(0.0..0.4);
    let adj = random_graph(&mut rng, n, extra);
    let si = rng.random_range(0..n);
    let world = formation_world(&adj, si);
    (adj, si, world)
}

pub fn lines(trace: &[String]) -> Vec<TraceLine<'_>> {
    trace
        .iter()
        .map(|l| TraceLine::parse(l).expect("trace line parses"))
        .collect()
}

pub fn count_ev(trace: &[String], ev: &str) -> usize {
    lines(trace).iter().filter(|l| l.ev == ev).count()
}

/// Transmissions per `(node, packet_id)`, read from `*_TX` trace lines.
pub fn tx_per_node_packet(trace: &[String]) -> BTreeMap<(String, u64), usize> {
    let mut out = BTreeMap::new();
    for l in lines(trace) {
        if l.ev.ends_with("_TX") {
            if let Some(p) = l.pkt {
                *out.entry((l.node.to_string(), p)).or_insert(0) += 1;
            }
        }
    }
    out
}

pub fn run_text(text: &str, seed: u64) -> hamanet::sim::RunOutput {
    let world = hamanet::scenario::parse_scenario(text).unwrap_or_else(|e| panic!("{e}"));
    hamanet::sim::run(&world, seed, hamanet::sim::RunOptions::default())
}

/// Trace lines carrying event `ev`, rendered back as strings for readable
/// assertion failures.
pub fn events<'a>(trace: &'a [String], ev: &str) -> Vec<&'a str> {
    trace
        .iter()
        .filter(|l| TraceLine::parse(l).is_some_and(|p| p.ev == ev))
        .map(String::as_str)
        .collect()
}
