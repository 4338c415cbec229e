//! Acceptance suite. Runs with a custom harness so every criterion prints a
//! PASS or FAIL line even when output capture is on.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use common::*;
use hamanet::model::{CommunityId, PacketKind, Path};
use hamanet::scenario::parse_scenario;
use hamanet::services::{compare_overhead, SessionState};
use hamanet::sim::metrics::DropReason;
use hamanet::sim::time::SimTime;
use hamanet::sim::trace::TraceLine;
use hamanet::sim::{run, RunOptions, Simulation};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("table reproduction", table_reproduction),
        ("one flood per start", one_flood),
        ("overhead crossover", overhead_crossover),
        ("route repair", route_repair),
        ("friend relay", friend_relay),
        ("operation enforcement", enforcement),
        ("file transfer integrity", transfer_integrity),
        ("multi-community society", society),
        ("determinism", determinism),
        ("oracle equivalence", oracle_equivalence),
    ];
    let start = std::time::Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = std::time::Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = t.elapsed().as_millis();
        match res {
            Ok(detail) => println!("PASS {:>2} {name} ({ms} ms): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({ms} ms): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn adj_of(sim: &Simulation) -> Adj {
    let topo = sim.topology();
    let mut adj = vec![Vec::new(); topo.len()];
    for (a, b) in topo.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn path_is_walk(adj: &Adj, path: &Path) -> bool {
    path.hops().windows(2).all(|w| adjacent(adj, w[0].idx(), w[1].idx()))
}

/// Every table row held anywhere, checked against `adj`. View paths record
/// formation, so they are only checked when the topology never changed.
fn stored_paths_valid(sim: &Simulation, adj: &Adj, views: bool) -> Result<usize, String> {
    let mut checked = 0;
    for node in 0..adj.len() {
        for (cid, m) in sim.memberships(node) {
            for (mid, path) in m.table.iter() {
                check!(
                    path.first().idx() == node,
                    "{cid} row at N{} starts elsewhere",
                    node + 1
                );
                check!(path.last() == &mid.node, "{cid} row for {mid} ends elsewhere");
                check!(path_is_walk(adj, path), "{cid} row {mid} is not a walk");
                checked += 1;
            }
            for path in m.view.si_paths.values().filter(|_| views) {
                check!(path_is_walk(adj, path), "{cid} view path is not a walk");
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn table4_oracle(adj: &Adj, si: usize, members: &[usize], from: usize, to: usize) -> (u64, u64) {
    let n = adj.len() as u64;
    let d_si = bfs(adj, si);
    let join_and_table: u64 = members.iter().map(|&m| 2 * d_si[m].unwrap() as u64).sum();
    let formation = n + join_and_table;
    let per_send = bfs(adj, from)[to].unwrap() as u64;
    (formation, per_send)
}

fn table_reproduction() -> Outcome {
    let world = scenario("table4");
    let out = run(&world, 7, RunOptions::default());
    let rows = &out.report.tables["N1"]["C1"];
    let want = ["N2/0 N1-N2", "N3/0 N1-N3", "N4/0 N1-N2-N4"];
    check!(rows == &want, "N1 table is {rows:?}");
    let json = out.report.to_json();
    let needle = "\"N4/0 N1-N2-N4\"";
    check!(json.contains(needle), "report lacks {needle}");
    Ok(format!("N1/C1 = {}", rows.join(", ")))
}

fn one_flood() -> Outcome {
    let mut max_n = 0;
    let mut paths = 0;
    for seed in 0..50 {
        let (adj, _, world) = random_formation(seed, 25);
        let n = adj.len() as u64;
        max_n = max_n.max(n);
        let out = run(&world, seed, RunOptions::default());
        let m = &out.report.metrics;
        check!(
            m.control_by(PacketKind::McStart) == n,
            "seed {seed}: {} MCSTART tx for {n} nodes",
            m.control_by(PacketKind::McStart)
        );
        check!(
            m.broadcast_tx == n,
            "seed {seed}: {} broadcasts for {n} nodes",
            m.broadcast_tx
        );
        paths += stored_paths_valid(&out.sim, &adj, true).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(format!("50 graphs up to {max_n} nodes, {paths} stored paths valid"))
}

fn overhead_crossover() -> Outcome {
    let world = scenario("table4");
    let report = compare_overhead(&world, 7, 20);
    let base = hamanet::sim::Simulation::new(&world, 7, RunOptions::default());
    let adj = adj_of(&base);
    let idx = |l: &str| world.node(l).unwrap();
    let members: Vec<usize> = ["N2", "N3", "N4"].iter().map(|l| idx(l)).collect();
    let (formation, per_send) = table4_oracle(&adj, idx("N1"), &members, idx("N1"), idx("N4"));
    let n = adj.len() as u64;
    let hamanet = |k: u64| formation + k * per_send;
    let baseline = |k: u64| n * k;
    let want_k = (1..=20u64).find(|&k| hamanet(k) < baseline(k)).map(|k| k as u32);

    let h = report.hamanet.metrics.total_tx;
    let b = report.baseline.metrics.total_tx;
    check!(h == hamanet(10), "hamanet total {h}, oracle {}", hamanet(10));
    check!(b == baseline(10), "baseline total {b}, oracle {}", baseline(10));
    check!(h < b, "hamanet {h} not below baseline {b}");
    for p in &report.scan {
        let k = p.k as u64;
        check!(
            p.hamanet_total == hamanet(k),
            "scan k={k}: hamanet {} vs oracle {}",
            p.hamanet_total,
            hamanet(k)
        );
        check!(
            p.baseline_total == baseline(k),
            "scan k={k}: baseline {} vs oracle {}",
            p.baseline_total,
            baseline(k)
        );
    }
    check!(
        report.crossover == want_k,
        "crossover {:?}, brute force {want_k:?}",
        report.crossover
    );
    Ok(format!(
        "hamanet {h} = oracle, baseline {b} = oracle, K = {}",
        want_k.unwrap()
    ))
}

fn route_repair() -> Outcome {
    let world = scenario("repair");
    let out = run(&world, 3, RunOptions::default());
    let lines = lines(out.trace.lines());
    let floods: BTreeSet<u64> = lines
        .iter()
        .filter(|l| l.ev == "RREQ_TX")
        .filter_map(|l| l.pkt)
        .collect();
    check!(floods.len() == 1, "{} RREQ floods", floods.len());
    check!(
        out.report.metrics.rreq_floods == 1,
        "metrics report {} floods",
        out.report.metrics.rreq_floods
    );
    let merged: usize = lines
        .iter()
        .filter(|l| l.ev == "RREP_MERGE")
        .map(|l| l.field("installed").unwrap().parse::<usize>().unwrap())
        .sum();
    check!(merged >= 1, "no row installed by the reply");
    let sent = lines.iter().find(|l| l.ev == "SEND").and_then(|l| l.pkt).unwrap();
    let delivered = lines
        .iter()
        .any(|l| l.ev == "DELIVER" && l.pkt == Some(sent) && l.node == "N4");
    check!(delivered, "packet {sent} not delivered at N4");
    let adj = adj_of(&out.sim);
    let n1 = world.node("N1").unwrap();
    let n4 = world.nodes[world.node("N4").unwrap()].clone();
    let cid = CommunityId::new("C1");
    let (_, path) = out
        .sim
        .table(n1, &cid)
        .unwrap()
        .get_by_node(&n4)
        .expect("N1 has a row for N4");
    check!(path_is_walk(&adj, path), "repaired path is not a walk");
    let repaired = hamanet::model::format_path(path);

    let text = scenario_text("repair").replace(", \"N3-N4\"", "");
    let world = parse_scenario(&text).map_err(|e| e.to_string())?;
    let out = run(&world, 3, RunOptions::default());
    let m = &out.report.metrics;
    let timeouts = count_ev(out.trace.lines(), "DELIVERY_TIMEOUT");
    check!(timeouts == 1, "{timeouts} DELIVERY_TIMEOUT lines without the detour");
    check!(
        m.dropped_by(DropReason::DeliveryTimeout) == 1,
        "delivery_timeout counter {}",
        m.dropped_by(DropReason::DeliveryTimeout)
    );
    check!(
        m.in_flight == 0 && m.delivered == 0,
        "in_flight {} delivered {}",
        m.in_flight,
        m.delivered
    );
    Ok(format!(
        "1 RREQ flood, installed {repaired}, delivered; detour removed gives 1 DeliveryTimeout"
    ))
}

fn friend_relay() -> Outcome {
    let world = scenario("friend");
    let out = run(&world, 5, RunOptions::default());
    let trace = out.trace.lines();
    let lines = lines(trace);
    let send = lines.iter().find(|l| l.ev == "SEND").and_then(|l| l.pkt).unwrap();
    check!(lines.iter().any(|l| l.ev == "FRIEND_TX"), "no FRIEND transmission");
    check!(lines.iter().any(|l| l.ev == "FRIEND_UNWRAP"), "FRIEND never unwrapped");
    check!(
        lines
            .iter()
            .any(|l| l.ev == "DELIVER" && l.pkt == Some(send) && l.node == "B"),
        "packet {send} not delivered at B"
    );
    check!(
        out.report.metrics.delivered == 1,
        "delivered {}",
        out.report.metrics.delivered
    );

    let non_members: BTreeSet<String> = (0..world.nodes.len())
        .filter(|&i| out.sim.memberships(i).next().is_none())
        .map(|i| world.nodes[i].label().to_string())
        .collect();
    check!(!non_members.is_empty(), "every node joined");
    let flood_ids: BTreeSet<u64> = lines
        .iter()
        .filter(|l| l.ev.ends_with("_TX") && l.field("dst") == Some("*"))
        .filter_map(|l| l.pkt)
        .collect();
    let mut checked = 0;
    for ((node, pkt), n) in tx_per_node_packet(trace) {
        if non_members.contains(&node) && flood_ids.contains(&pkt) {
            check!(n <= 1, "{node} transmitted flood {pkt} {n} times");
            checked += 1;
        }
    }
    Ok(format!(
        "delivered via FRIEND through {:?}; {checked} non-member flood forwards, none repeated",
        non_members
    ))
}

fn enforcement() -> Outcome {
    let world = scenario("adversary");
    let mut sim = Simulation::new(&world, 11, RunOptions::default());
    sim.run_until(SimTime::from_units(20.0));
    let before = sim.tables_digest();
    sim.run_until(SimTime::from_units(44.0));
    let after = sim.tables_digest();
    check!(before == after, "tables changed under UNDECLARED_OP traffic");
    let m = sim.metrics().clone();
    let rejects = count_ev(sim.trace().lines(), "OP_REJECT") as u64;
    check!(
        m.adversary_packets >= 100,
        "only {} adversary packets",
        m.adversary_packets
    );
    check!(m.rejected_ops == 100, "rejected_ops {}", m.rejected_ops);
    check!(
        m.rejected_ops == rejects,
        "rejected_ops {} vs {rejects} OP_REJECT lines",
        m.rejected_ops
    );
    check!(
        m.dropped_by(DropReason::OpRejected) == 100,
        "op_rejected drops {}",
        m.dropped_by(DropReason::OpRejected)
    );
    let wrongly = sim
        .trace()
        .lines()
        .iter()
        .filter_map(|l| TraceLine::parse(l))
        .filter(|l| l.ev == "DELIVER" && l.field("op") == Some("UNDECLARED_OP"))
        .count();
    check!(wrongly == 0, "{wrongly} undeclared packets delivered");

    sim.run();
    let trace = sim.trace().lines();
    let lines = lines(trace);
    let bogus: BTreeSet<u64> = lines
        .iter()
        .filter(|l| l.ev == "RREP_TX" && l.node == "B")
        .filter_map(|l| l.pkt)
        .collect();
    check!(!bogus.is_empty(), "B sent no replies");
    let installed_from_b: usize = lines
        .iter()
        .filter(|l| l.ev == "RREP_MERGE" && l.pkt.is_some_and(|p| bogus.contains(&p)))
        .map(|l| l.field("installed").unwrap().parse::<usize>().unwrap())
        .sum();
    check!(installed_from_b == 0, "{installed_from_b} rows installed from B");
    let adj = adj_of(&sim);
    stored_paths_valid(&sim, &adj, false)?;
    let m = sim.metrics();
    Ok(format!(
        "{} rejected = {rejects} arrivals, digest stable; {} bogus replies, 0 rows installed ({} stale, {} rejected)",
        m.rejected_ops,
        bogus.len(),
        m.stale_replies,
        m.rejected_replies
    ))
}

fn transfer_integrity() -> Outcome {
    let world = scenario("ftp");
    let mut complete = 0;
    let mut failed = 0;
    for seed in 1..=20u64 {
        let out = run(&world, seed, RunOptions::default());
        let s = out.report.sessions.first().ok_or(format!("seed {seed}: no session"))?;
        match s.state {
            SessionState::Complete => {
                check!(s.origin_digest.is_some(), "seed {seed}: no origin digest");
                check!(
                    s.received_digest == s.origin_digest,
                    "seed {seed}: COMPLETE with mismatched digest"
                );
                check!(s.bytes_received == 1 << 20, "seed {seed}: {} bytes", s.bytes_received);
                complete += 1;
            }
            SessionState::Failed => {
                check!(
                    s.failure.as_deref() == Some("TransferFailed"),
                    "seed {seed}: failed with {:?}",
                    s.failure
                );
                failed += 1;
            }
            other => return Err(format!("seed {seed}: session left in {other:?}")),
        }
    }
    check!(complete == 20, "{complete} complete, {failed} TransferFailed");
    Ok("20/20 seeds COMPLETE with matching digests".to_string())
}

fn society() -> Outcome {
    let world = scenario("fig4");
    let out = run(&world, 2, RunOptions::default());
    let r = &out.report;
    check!(r.society.len() == 5, "society has {} rows", r.society.len());
    check!(
        r.metrics.formation_ticks.len() == 5,
        "{} communities formed",
        r.metrics.formation_ticks.len()
    );
    let mut delivers = 0;
    for l in lines(out.trace.lines()) {
        if l.ev != "DELIVER" {
            continue;
        }
        let cid = l.field("cid").unwrap();
        check!(
            l.field("mcid") == Some(cid),
            "{} delivered {cid} to a {:?} machine",
            l.node,
            l.field("mcid")
        );
        let (label, ord) = l.field("machine").unwrap().split_once('/').unwrap();
        let node = world.node(label).unwrap();
        let ord: usize = ord.parse().unwrap();
        let mcid = out.sim.machines(node)[ord].cid().map(|c| c.as_str().to_string());
        check!(
            mcid.as_deref() == Some(cid),
            "machine {label}/{ord} is in {mcid:?}, got {cid}"
        );
        delivers += 1;
    }
    check!(delivers > 0, "no deliveries to audit");
    let ticks: BTreeSet<u64> = r.metrics.formation_ticks.values().copied().collect();
    Ok(format!(
        "5 society rows, formed at {ticks:?}, {delivers} deliveries audited"
    ))
}

/// Society, community ids per node and session states.
type Structure = (
    BTreeMap<String, String>,
    BTreeMap<String, BTreeSet<String>>,
    Vec<String>,
);

fn structure(out: &hamanet::sim::RunOutput) -> Structure {
    let members = out
        .report
        .tables
        .iter()
        .map(|(n, t)| (n.clone(), t.keys().cloned().collect()))
        .collect();
    let sessions = out.report.sessions.iter().map(|s| format!("{:?}", s.state)).collect();
    (out.report.society.clone(), members, sessions)
}

fn determinism() -> Outcome {
    let mut runs = 0;
    for name in SCENARIOS {
        let world = scenario(name);
        let mut shapes = Vec::new();
        for seed in [1u64, 2] {
            let a = run(&world, seed, RunOptions::default());
            let b = run(&world, seed, RunOptions::default());
            check!(
                a.report.to_json() == b.report.to_json(),
                "{name} seed {seed}: reports differ"
            );
            check!(
                a.trace.render() == b.trace.render(),
                "{name} seed {seed}: traces differ"
            );
            shapes.push(structure(&a));
            runs += 2;
        }
        check!(
            shapes[0] == shapes[1],
            "{name}: membership or session outcome depends on the seed"
        );
    }
    Ok(format!(
        "{runs} runs over {} scenarios bit-identical per seed",
        SCENARIOS.len()
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut rows = 0;
    let mut stretched = 0;
    for seed in 0..200 {
        let (adj, _, world) = random_formation(1000 + seed, 8);
        let n = adj.len();
        let diam = diameter(&adj);
        let out = run(&world, seed, RunOptions::default());
        for node in 0..n {
            let dist = bfs(&adj, node);
            let mut seen = 0;
            for (cid, m) in out.sim.memberships(node) {
                for (mid, path) in m.table.iter() {
                    let to = mid.node.idx();
                    check!(
                        path.first().idx() == node && to != node,
                        "seed {seed}: {cid} row {mid} at N{} misplaced",
                        node + 1
                    );
                    check!(
                        path_is_walk(&adj, path),
                        "seed {seed}: row {mid} at N{} is not a walk",
                        node + 1
                    );
                    let s = dist[to].ok_or(format!("seed {seed}: row to unreachable {mid}"))?;
                    let h = path.hop_count();
                    check!(
                        s <= h && h <= s + diam,
                        "seed {seed}: {h} hops vs shortest {s}, diameter {diam}"
                    );
                    if h > s {
                        stretched += 1;
                    }
                    rows += 1;
                    seen += 1;
                }
            }
            check!(
                seen == n - 1,
                "seed {seed}: N{} holds {seen} rows of {}",
                node + 1,
                n - 1
            );
        }
    }
    Ok(format!(
        "200 graphs, {rows} rows within bounds ({stretched} longer than shortest)"
    ))
}
