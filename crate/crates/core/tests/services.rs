mod common;

use common::*;
use hamanet::model::{CommunityId, Digest, PacketKind};
use hamanet::scenario::{generated_content, parse_scenario};
use hamanet::services::{compare_overhead, ServiceError, SessionState};
use hamanet::sim::time::SimTime;
use hamanet::sim::{run, Mode, RunOptions, Simulation};

fn ftp_text(size: u64, loss: &str, transport: &str) -> String {
    format!(
        r#"
[params]
end_time = 5000

[topology]
nodes = ["N1", "N2", "N3"]
edges = ["N1-N2-N3"]

[[art]]
name = "T"
layer = "transport"
params = {{ {transport} }}

[[culture]]
name = "File service"
transport = "T"
application = "FTP"

[interest]
N2 = ["File service"]
N3 = ["File service"]

[[file]]
node = "N1"
name = "f"
size = {size}
seed = 5

[[step]]
at = 0
action = "start_service"
node = "N1"
culture = "File service"

[[step]]
at = 20
action = "ftp"
from = "N3"
to = "N1"
cid = "C1"
file = "f"
{loss}
"#
    )
}

/// Drops packets on N1-N2 once the community has formed.
fn loss_step(p: f64) -> String {
    format!("[[step]]\nat = 15\naction = \"set_loss\"\nedge = \"N1-N2\"\nloss = {p}\n")
}

const PLAIN: &str = "window = 4, retries = 8, rto = 10, chunk_size = 1024";

#[test]
fn three_chunk_file_arrives_intact() {
    let out = run_text(&ftp_text(3000, "", PLAIN), 1);
    let s = &out.report.sessions[0];
    assert_eq!(s.state, SessionState::Complete);
    assert_eq!(s.total_chunks, 3);
    assert_eq!(s.acked, 3);
    assert_eq!(s.retransmissions, 0);
    let want = Digest::of(&generated_content(5, 3000)).to_hex();
    assert_eq!(s.received_digest.as_deref(), Some(want.as_str()));
    assert_eq!(s.origin_digest, s.received_digest);
    let acks = lines(out.trace.lines())
        .iter()
        .filter(|l| l.ev == "DELIVER" && l.field("op") == Some("FILE_ACK"))
        .count();
    assert_eq!(acks, 3);
}

#[test]
fn empty_file_is_one_empty_chunk() {
    let out = run_text(&ftp_text(0, "", PLAIN), 1);
    let s = &out.report.sessions[0];
    assert_eq!(s.state, SessionState::Complete);
    assert_eq!(s.total_chunks, 1);
    assert_eq!(s.bytes_received, 0);
}

#[test]
fn lossy_link_retransmits_and_completes() {
    let out = run_text(&ftp_text(20_000, &loss_step(0.2), PLAIN), 3);
    let s = &out.report.sessions[0];
    assert_eq!(s.state, SessionState::Complete, "{:?}", s.failure);
    assert_eq!(s.received_digest, s.origin_digest);
    assert!(out.report.metrics.link_losses > 0);
}

#[test]
fn hopeless_link_reports_transfer_failed() {
    let out = run_text(
        &ftp_text(
            8000,
            &loss_step(0.95),
            "window = 2, retries = 2, rto = 5, chunk_size = 1024",
        ),
        1,
    );
    let s = &out.report.sessions[0];
    assert_eq!(s.state, SessionState::Failed);
    assert_eq!(s.failure.as_deref(), Some("TransferFailed"));
    assert_ne!(s.received_digest, s.origin_digest);
}

#[test]
fn missing_file_and_outsiders() {
    let world = parse_scenario(&ftp_text(10, "", PLAIN)).unwrap();
    let mut sim = Simulation::new(&world, 1, RunOptions::default());
    sim.run_until(SimTime::from_units(15.0));
    let c1 = CommunityId::new("C1");
    let err = sim.ftp_request(2, 0, &c1, "nope").unwrap_err();
    assert!(matches!(err, ServiceError::NoSuchFile { .. }));
    assert_eq!(sim.sessions()[0].state, SessionState::Failed);
    let err = sim.ftp_request(2, 0, &CommunityId::new("C5"), "f").unwrap_err();
    assert!(matches!(err, ServiceError::NotInCommunity { .. }));
}

#[test]
fn chunk_size_parameter_overrides_the_art() {
    let text = ftp_text(3000, "", PLAIN).replace("end_time = 5000", "end_time = 5000\nchunk_size = 500");
    let out = run_text(&text, 1);
    assert_eq!(out.report.sessions[0].total_chunks, 6);
    assert_eq!(out.report.sessions[0].state, SessionState::Complete);
}

const FLOOD_ONLY: &str = r#"
[topology]
nodes = ["N1", "N2", "N3", "N4", "N5", "N6"]
edges = ["N1-N2-N3", "N1-N3"]

[[culture]]
name = "File service"
application = "FTP"

[[step]]
at = 5
action = "send"
from = "N1"
to = "N3"
cid = "C1"
mirror = true
count = 3
"#;

#[test]
fn flood_only_reaches_the_component() {
    let world = parse_scenario(&FLOOD_ONLY.replace("\"N1-N3\"]", "\"N1-N3\", \"N4-N5-N6\"]")).unwrap();
    let opts = RunOptions {
        mode: Mode::Baseline,
        ..RunOptions::default()
    };
    let out = run(&world, 1, opts);
    // three nodes in the sender's component, three messages
    assert_eq!(out.report.metrics.total_tx, 9);
    assert_eq!(out.report.metrics.delivered, 3);
    let transmitters: std::collections::BTreeSet<&str> = lines(out.trace.lines())
        .iter()
        .filter(|l| l.ev.ends_with("_TX"))
        .map(|l| l.node)
        .collect();
    assert_eq!(transmitters.into_iter().collect::<Vec<_>>(), ["N1", "N2", "N3"]);
}

#[test]
fn flood_costs_one_transmission_per_node() {
    for seed in 0..10 {
        let (adj, _, mut world) = random_formation(500 + seed, 12);
        world.steps.clear();
        world.step(
            1.0,
            hamanet::scenario::StepAction::Send {
                from: 0,
                to: adj.len() - 1,
                cid: CommunityId::new("C1"),
                op: None,
                bytes: 10,
                count: 2,
                interval: SimTime::from_units(50.0),
                mirror: true,
            },
        );
        let opts = RunOptions {
            mode: Mode::Baseline,
            ..RunOptions::default()
        };
        let out = run(&world, seed, opts);
        assert_eq!(out.report.metrics.total_tx, 2 * adj.len() as u64, "seed {seed}");
        assert_eq!(out.report.metrics.broadcast_tx, 2 * adj.len() as u64);
    }
}

#[test]
fn compare_matches_closed_form_on_random_graphs() {
    // formation: one MCSTART per node, each join and its table walk the
    // initiator's reversed path; every send walks the installed row
    for seed in 0..6 {
        let (adj, si, _) = random_formation(800 + seed, 9);
        let mut world = slotted_world(&adj, si);
        let dest = (si + 1) % adj.len();
        world.step(
            30.0,
            hamanet::scenario::StepAction::Send {
                from: si,
                to: dest,
                cid: CommunityId::new("C1"),
                op: None,
                bytes: 10,
                count: 1,
                interval: SimTime::from_units(1.0),
                mirror: true,
            },
        );
        let report = compare_overhead(&world, seed, 5);
        let d = bfs(&adj, si);
        let n = adj.len() as u64;
        let joinsum: u64 = (0..adj.len()).filter(|&i| i != si).map(|i| d[i].unwrap() as u64).sum();
        let h = report.hamanet.metrics;
        assert_eq!(h.control_by(PacketKind::McStart), n, "seed {seed}");
        assert_eq!(h.control_by(PacketKind::McJoin), joinsum, "seed {seed}");
        for p in &report.scan {
            assert_eq!(p.baseline_total, n * p.k as u64, "seed {seed} k {}", p.k);
            assert_eq!(
                p.hamanet_data,
                d[dest].unwrap() as u64 * p.k as u64,
                "seed {seed} k {}",
                p.k
            );
        }
    }
}

#[test]
fn zero_sends_favor_flooding() {
    let text = scenario_text("table4");
    let cut = text[..text.find("at = 30").unwrap()].rfind("[[step]]").unwrap();
    let world = parse_scenario(&text[..cut]).unwrap();
    let report = compare_overhead(&world, 7, 20);
    assert_eq!(report.baseline.metrics.total_tx, 0);
    assert!(report.hamanet.metrics.total_tx > 0);
    assert!(!report.hamanet_wins);
    // no workload to scale, so no message count ever favors communities
    assert_eq!(report.crossover, None);
}

#[test]
fn compare_on_table4_prefers_communities() {
    let report = compare_overhead(&scenario("table4"), 7, 12);
    assert!(report.hamanet_wins);
    assert_eq!(report.scan.len(), 12);
    assert!(report.to_json().contains("\"crossover\": 7"));
}
